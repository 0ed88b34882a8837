"""Continual-learning strategies sharing one trainer interface."""

from .base import ContinualMethod, StageSettings, fit
from .ewc import EWC
from .gem import AGEM
from .lora import LoRA
from .lwf import LwF
from .ogd import OGD
from .piggyback import PiggyBack
from .replay import Replay, ReservoirReplay
from .sle import SLE

METHODS: dict[str, type[ContinualMethod]] = {
    cls.name: cls
    for cls in (ContinualMethod, SLE, LwF, EWC, ReservoirReplay, Replay, OGD, AGEM, PiggyBack, LoRA)
}


def make_method(name: str, model, hparams=None, metric_cfg=None, seed: int = 0) -> ContinualMethod:
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; choose from {sorted(METHODS)}")
    kwargs = {"seed": seed}
    if metric_cfg is not None:
        kwargs["metric_cfg"] = metric_cfg
    return METHODS[name](model, hparams, **kwargs)


__all__ = ["METHODS", "ContinualMethod", "StageSettings", "fit", "make_method"]
