"""SDANet graph: inception-style shallow extractor, dense residual encoder,
shallow-feature attention, and coarse/fine density heads."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import Tensor, concat_channels, conv2d, mul, relu, same_padding, sigmoid, add

LFE_KERNELS = (3, 5, 7)
INIT_STD = 0.01


@dataclass
class ModelConfig:
    input_channels: int = 1
    lfe_branch_channels: int = 16
    hfe_layer_channels: int = 64
    feature_channels: int = 64
    hfe_blocks: int = 2
    amg_hidden_channels: int = 32
    fine_hidden_channels: int = 16
    dilation_block2: int = 2
    use_amg: bool = True
    use_dense: bool = True
    use_refine: bool = True
    # pixel preprocessing: x -> (x - input_mean) * input_scale, with x in [0, 1]
    input_mean: float = 0.449
    input_scale: float = 255.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if not (np.isfinite(self.input_mean) and np.isfinite(self.input_scale) and self.input_scale > 0):
            raise ValueError("input_mean must be finite and input_scale finite and positive")
        if self.feature_channels != 4 * self.lfe_branch_channels:
            raise ValueError("feature_channels must equal 4 * lfe_branch_channels "
                             f"({self.feature_channels} vs {self.lfe_branch_channels})")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Every conv emits four channels (LFE branches 4 wide, concat 16); for fast checks."""
        base = dict(lfe_branch_channels=4, feature_channels=16, hfe_layer_channels=4,
                    amg_hidden_channels=4, fine_hidden_channels=4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerSpec:
    path: str
    in_channels: int
    out_channels: int
    kernel: int
    dilation: int = 1

    @property
    def n_params(self) -> int:
        return self.out_channels * self.in_channels * self.kernel ** 2 + self.out_channels


def _lfe_specs(cfg: ModelConfig, block: int, in_c: int) -> Iterator[LayerSpec]:
    dil = cfg.dilation_block2 if block == 2 else 1
    b = cfg.lfe_branch_channels
    half = max(1, in_c // 2)
    prefix = f"lfe.block{block}"
    yield LayerSpec(f"{prefix}.branch1.conv", in_c, b, 1)
    for k in LFE_KERNELS:
        yield LayerSpec(f"{prefix}.branch{k}.reduce", in_c, half, 1)
        yield LayerSpec(f"{prefix}.branch{k}.conv", half, b, k, dil)


def layer_specs(cfg: ModelConfig) -> List[LayerSpec]:
    """Every convolution in the graph, in a fixed order (also the init order)."""
    F, L = cfg.feature_channels, cfg.hfe_layer_channels
    specs = list(_lfe_specs(cfg, 1, cfg.input_channels))
    specs += _lfe_specs(cfg, 2, F)
    for i in range(1, cfg.hfe_blocks + 1):
        for j in range(1, 4):
            in_c = F + (j - 1) * L if cfg.use_dense else (F if j == 1 else L)
            specs.append(LayerSpec(f"hfe.block{i}.layer{j}", in_c, L, 3))
        specs.append(LayerSpec(f"hfe.block{i}.reduce", 3 * L, F, 1))
    specs.append(LayerSpec("hfe.global.reduce", (1 + cfg.hfe_blocks) * F, F, 1))
    specs.append(LayerSpec("hfe.global.conv", F, F, 3))
    if cfg.use_amg:
        specs.append(LayerSpec("amg.conv1", F, cfg.amg_hidden_channels, 3))
        specs.append(LayerSpec("amg.conv2", cfg.amg_hidden_channels, 1, 1))
    specs.append(LayerSpec("head.coarse", F, 1, 3))
    if cfg.use_refine:
        specs.append(LayerSpec("head.fine1", F, cfg.fine_hidden_channels, 3))
        specs.append(LayerSpec("head.fine2", cfg.fine_hidden_channels, 1, 1))
    return specs


def param_count(cfg: ModelConfig) -> int:
    return sum(s.n_params for s in layer_specs(cfg))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: "OrderedDict[str, Tensor]"
    seed: Optional[int] = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self) -> Dict[str, Tensor]:
        return self.tensors

    def total(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.tensors.items() if t.grad is not None}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict(
            (k, Tensor(t.data.copy(), requires_grad=True)) for k, t in self.tensors.items()), self.seed)


def build_model(cfg: ModelConfig, rng=None, seed: Optional[int] = None) -> ModelParams:
    """Gaussian(0, 0.01) weights, zero biases; deterministic for a given generator state."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for s in layer_specs(cfg):
        w = rng.normal(0.0, INIT_STD, size=(s.out_channels, s.in_channels, s.kernel, s.kernel))
        tensors[s.path + ".weight"] = Tensor(w, requires_grad=True)
        tensors[s.path + ".bias"] = Tensor(np.zeros((1, s.out_channels, 1, 1)), requires_grad=True)
    return ModelParams(cfg, tensors, seed)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutputs:
    F_M1: Tensor
    F_M2: Tensor
    F_L: List[Tensor]
    F_g: Tensor
    F_G: Tensor
    F_att: Optional[Tensor]
    F_ref: Tensor
    D_C: Tensor
    D_F: Tensor

    @property
    def F_L1(self) -> Tensor:
        return self.F_L[0]

    @property
    def F_L2(self) -> Tensor:
        return self.F_L[1]

    def maps(self) -> Dict[str, Tensor]:
        out = {"F_M1": self.F_M1, "F_M2": self.F_M2, "F_g": self.F_g, "F_G": self.F_G,
               "F_ref": self.F_ref, "D_C": self.D_C, "D_F": self.D_F}
        for i, t in enumerate(self.F_L, 1):
            out[f"F_L{i}"] = t
        if self.F_att is not None:
            out["F_att"] = self.F_att
        return out


def _conv(params: ModelParams, path: str, x: Tensor, dilation: int = 1) -> Tensor:
    w = params[path + ".weight"]
    k = w.shape[2]
    return conv2d(x, w, params[path + ".bias"], dilation, same_padding(k, dilation))


def _lfe_block(params: ModelParams, x: Tensor, block: int, dilation: int) -> Tensor:
    prefix = f"lfe.block{block}"
    branches = [relu(_conv(params, f"{prefix}.branch1.conv", x))]
    for k in LFE_KERNELS:
        r = relu(_conv(params, f"{prefix}.branch{k}.reduce", x))
        branches.append(relu(_conv(params, f"{prefix}.branch{k}.conv", r, dilation)))
    return concat_channels(branches)


def lfe_forward(params: ModelParams, x: Tensor) -> Tuple[Tensor, Tensor]:
    cfg = params.config
    if x.shape[1] != cfg.input_channels:
        raise ValueError(f"input has {x.shape[1]} channels, model expects {cfg.input_channels}")
    f_m1 = _lfe_block(params, x, 1, 1)
    f_m2 = _lfe_block(params, f_m1, 2, cfg.dilation_block2)
    return f_m1, f_m2


def _hfe_block(params: ModelParams, x: Tensor, i: int, dense: bool) -> Tensor:
    outs: List[Tensor] = []
    for j in range(1, 4):
        if dense:
            inp = concat_channels([x] + outs)
        else:
            inp = outs[-1] if outs else x
        outs.append(relu(_conv(params, f"hfe.block{i}.layer{j}", inp)))
    return add(x, _conv(params, f"hfe.block{i}.reduce", concat_channels(outs)))


def hfe_forward(params: ModelParams, f_m2: Tensor) -> Tuple[List[Tensor], Tensor, Tensor]:
    """Returns ``(block outputs, F_g, F_G)``."""
    cfg = params.config
    if f_m2.shape[1] != cfg.feature_channels:
        raise ValueError(f"HFE input has {f_m2.shape[1]} channels, expected {cfg.feature_channels}")
    blocks, x = [], f_m2
    for i in range(1, cfg.hfe_blocks + 1):
        x = _hfe_block(params, x, i, cfg.use_dense)
        blocks.append(x)
    f_g = concat_channels([f_m2] + blocks)
    f_G = relu(_conv(params, "hfe.global.conv", relu(_conv(params, "hfe.global.reduce", f_g))))
    return blocks, f_g, f_G


def amg_forward(params: ModelParams, f_m1: Tensor) -> Tensor:
    hidden = relu(_conv(params, "amg.conv1", f_m1))
    return sigmoid(_conv(params, "amg.conv2", hidden))


def preprocess(cfg: ModelConfig, x) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    return Tensor((x - cfg.input_mean) * cfg.input_scale)


def forward(params: ModelParams, x, attention: Optional[np.ndarray] = None) -> ForwardOutputs:
    """Full forward pass.

    ``attention`` replaces the generated attention map with a fixed
    ``(N, 1, H, W)`` array; the attention branch is then not evaluated.
    ``x`` holds raw pixels in [0, 1]; preprocessing from the config is applied here.
    """
    cfg = params.config
    x = preprocess(cfg, x.data if isinstance(x, Tensor) else x)
    f_m1, f_m2 = lfe_forward(params, x)
    blocks, f_g, f_G = hfe_forward(params, f_m2)
    if attention is not None:
        f_att = Tensor(attention)
        f_ref = mul(f_G, f_att)
    elif cfg.use_amg:
        f_att = amg_forward(params, f_m1)
        f_ref = mul(f_G, f_att)
    else:
        f_att, f_ref = None, f_G
    d_c = relu(_conv(params, "head.coarse", f_ref))
    if cfg.use_refine:
        d_f = relu(_conv(params, "head.fine2", relu(_conv(params, "head.fine1", f_ref))))
    else:
        d_f = d_c
    return ForwardOutputs(f_m1, f_m2, blocks, f_g, f_G, f_att, f_ref, d_c, d_f)
