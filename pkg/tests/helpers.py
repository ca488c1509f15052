"""Small, fast configurations shared by the trainer-level tests."""
from functools import lru_cache

import numpy as np

from earthgate.backbone import BackboneConfig
from earthgate.config import Mode, TrainConfig
from earthgate.fisher import GateConfig
from earthgate.synth import DatasetConfig, make_benchmark, toy_casid_domains
from earthgate.tensor import Tensor, cross_entropy, matmul, mul
from earthgate.toolbox import ModuleId, ModuleKind, ToolboxDims

TINY_DATA = DatasetConfig(image_size=16, train_count=12, test_count=4, pretrain_count=8)


@lru_cache(maxsize=None)
def tiny_bench():
    pretrain, source, targets = toy_casid_domains()
    return make_benchmark(source, targets, TINY_DATA, pretrain)


def tiny_config(mode=Mode.GATE, *, T=20, top_k=2, selection_count=2, M=3, seed=0, depth=2, **kw) -> TrainConfig:
    cfg = TrainConfig(
        backbone=BackboneConfig(16, 3, 4, depth, 16, 2, 2, 5),
        toolbox=ToolboxDims(2, 4, 3, 0.3, 0.1),
        gate=GateConfig(top_k, M, selection_count, T),
        mode=mode,
        learning_rate=1e-2,
        batch_size=2,
        seed=seed,
        pretrain_iterations=5,
        pretrain_batch_size=2,
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


class TwoModuleToy:
    """logits = (x @ W) * v, three classes; a third module is never used."""

    def __init__(self, rng):
        self.W = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        self.v = Tensor(rng.normal(size=3), requires_grad=True)
        self.u = Tensor(rng.normal(size=4), requires_grad=True)

    def module_params(self):
        return {
            ModuleId(0, ModuleKind.SPATIAL): {"W": self.W},
            ModuleId(0, ModuleKind.SEMANTIC): {"v": self.v},
            ModuleId(1, ModuleKind.SEMANTIC): {"u": self.u},
        }

    def loss(self, sample, c=1.0):
        x, y = sample
        z = mul(matmul(Tensor(np.asarray(x)[None, :]), self.W), self.v)
        return cross_entropy(z, [y]) * c
