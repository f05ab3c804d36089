import time
from dataclasses import dataclass, field
from functools import cached_property

import pytest

from metadt import experiments as X
from metadt.config import RunConfig
from metadt.dtinet import DTINetParams, init_params
from metadt.episodes import child_rng

EVAL_EPISODES = 200


@dataclass
class DeskRun:
    """The reference desk-scale run: default config, 20 epochs, 20 base / 5 novel classes."""

    cfg: RunConfig
    world: X.World
    init: DTINetParams
    trained: DTINetParams
    log: list
    train_seconds: float
    timings: dict = field(default_factory=dict)

    def _timed(self, key, fn):
        start = time.perf_counter()
        out = fn()
        self.timings[key] = time.perf_counter() - start
        return out

    @cached_property
    def untrained_eval(self) -> X.EvalResult:
        return self._timed("untrained", lambda: X.evaluate(self.init, self.cfg, self.world, episodes=EVAL_EPISODES))

    @cached_property
    def trained_eval(self) -> X.EvalResult:
        return self._timed("trained", lambda: X.evaluate(self.trained, self.cfg, self.world, episodes=EVAL_EPISODES))

    @cached_property
    def no_adapt_eval(self) -> X.EvalResult:
        cfg = self.cfg.replace(no_adapt=True)
        return self._timed("no_adapt", lambda: X.evaluate(self.trained, cfg, self.world, episodes=EVAL_EPISODES))


@pytest.fixture(scope="session")
def desk_run() -> DeskRun:
    cfg = RunConfig()
    world = X.build_world(cfg)
    init = init_params(X.dims_for(cfg, world), child_rng(cfg.seed, X.INIT))
    start = time.perf_counter()
    trained, log = X.train(cfg, world)
    return DeskRun(cfg, world, init, trained, log, time.perf_counter() - start)
