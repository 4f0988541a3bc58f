"""Feature extractors, classifier head, and the conditioned model wrapper."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AvgPool, BatchNorm, Conv2d, Dense, Dropout, ELU, Flatten, Graph, SqueezeExcite
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import EmbeddingTable, conditioned_backward, conditioned_forward
from .dsp import window_samples
from .errors import ConfigurationError

ARCHS = ("eegnet", "p300mcnn", "phinet")
BUDGETS = {"eegnet": 4500, "p300mcnn": 9500, "phinet": 3500}
BUDGET_TOLERANCE = 0.25
SPATIAL_LAYER = "conv_spatial"


@dataclass
class ArchitectureConfig:
    arch: str = "eegnet"
    n_channels: int = 8
    window_s: float = 0.5
    sfreq: float = 125.0
    kernel_length: int | None = None
    dropout_rate: float = 0.25
    feature_dim: int | None = None
    epoch_tmin: float = -0.1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.kernel_length is None:
            self.kernel_length = max(self.n_samples // 2, 1)
        if self.kernel_length < 1:
            raise ConfigurationError("kernel_length must be positive")

    @property
    def n_samples(self) -> int:
        return window_samples(self.window_s, self.sfreq, self.epoch_tmin, raw_sfreq=2 * self.sfreq)

    def to_dict(self):
        return asdict(self)


def _eegnet(cfg: ArchitectureConfig) -> list:
    f1, depth, f2 = 8, 8, 32
    c, k, p = cfg.n_channels, cfg.kernel_length, cfg.dropout_rate
    return [
        Conv2d("conv_temporal", 1, f1, (1, k)),
        BatchNorm("bn1", f1),
        Conv2d(SPATIAL_LAYER, f1, f1 * depth, (c, 1), groups=f1, padding="valid"),
        BatchNorm("bn2", f1 * depth),
        ELU("elu1"),
        AvgPool("pool1", 4),
        Dropout("drop1", p),
        Conv2d("sep_depthwise", f1 * depth, f1 * depth, (1, 16), groups=f1 * depth),
        Conv2d("sep_pointwise", f1 * depth, f2, (1, 1)),
        BatchNorm("bn3", f2),
        ELU("elu2"),
        AvgPool("pool2", 8),
        Dropout("drop2", p),
        Flatten("flatten"),
    ]


def _p300mcnn(cfg: ArchitectureConfig) -> list:
    f1, f_sp = 16, 32
    c, k, p = cfg.n_channels, cfg.kernel_length, cfg.dropout_rate
    return [
        Conv2d("conv_temporal", 1, f1, (1, k)),
        BatchNorm("bn1", f1),
        Conv2d(SPATIAL_LAYER, f1, f_sp, (c, 1), groups=f1, padding="valid"),
        BatchNorm("bn2", f_sp),
        ELU("elu1"),
        AvgPool("pool1", 3),
        Dropout("drop1", p),
        Conv2d("conv_temporal2", f_sp, f_sp, (1, 8)),
        BatchNorm("bn3", f_sp),
        ELU("elu2"),
        AvgPool("pool2", 5),
        Dropout("drop2", p),
        Flatten("flatten"),
    ]


def _phinet(cfg: ArchitectureConfig) -> list:
    f0, f1, f2 = 16, 32, 32
    c, k, p = cfg.n_channels, cfg.kernel_length, cfg.dropout_rate
    return [
        Conv2d(SPATIAL_LAYER, 1, f0, (c, 1), padding="valid"),
        BatchNorm("bn0", f0),
        Conv2d("dw1", f0, f0, (1, k), groups=f0),
        Conv2d("pw1", f0, f1, (1, 1)),
        BatchNorm("bn1", f1),
        ELU("elu1"),
        AvgPool("pool1", 4),
        SqueezeExcite("se1", f1, reduction=4),
        Dropout("drop1", p),
        Conv2d("dw2", f1, f1, (1, 8), groups=f1),
        Conv2d("pw2", f1, f2, (1, 1)),
        BatchNorm("bn2", f2),
        ELU("elu2"),
        AvgPool("pool2", 4),
        Dropout("drop2", p),
        Flatten("flatten"),
    ]


RECIPES = {"eegnet": _eegnet, "p300mcnn": _p300mcnn, "phinet": _phinet}


@dataclass
class Model:
    config: ArchitectureConfig
    extractor: Graph
    head: Graph
    conditioning: str = "none"
    table: EmbeddingTable | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.extractor.output_shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        """Live arrays keyed by full name; updating them updates the model."""
        out = {f"extractor.{k}": v for k, v in self.extractor.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        if self.table is not None:
            out["table.rows"] = self.table.rows
        return out

    def set_parameter(self, name: str, value: np.ndarray):
        group, _, local = name.partition(".")
        if group == "table":
            self.table.rows = value
        else:
            getattr(self, group).params[local] = value

    def astype(self, dtype) -> "Model":
        m = self.copy()
        m.extractor = self.extractor.astype(dtype)
        m.head = self.head.astype(dtype)
        if m.table is not None:
            m.table.rows = m.table.rows.astype(dtype)
        return m

    def copy(self) -> "Model":
        return replace(
            self,
            config=replace(self.config),
            extractor=self.extractor.copy(),
            head=self.head.copy(),
            table=None if self.table is None else self.table.copy(),
            meta=dict(self.meta),
        )


def build_extractor(cfg: ArchitectureConfig) -> Graph:
    return Graph(RECIPES[cfg.arch](cfg), (1, cfg.n_channels, cfg.n_samples))


def build(cfg: ArchitectureConfig, seed: int = 0, conditioning: str = "none", subjects=(),
          enforce_budget: bool = True) -> Model:
    """Deterministically initialised model; raises if outside the parameter budget."""
    cfg = replace(cfg)
    rng = np.random.default_rng(seed)
    extractor = build_extractor(cfg).initialize(rng)
    d = extractor.output_shape[0]
    cfg.feature_dim = d
    head = Graph([Dense("dense", d, 1)], (d,)).initialize(rng)
    table = None
    if conditioning not in ("none", "projection", "film"):
        raise ConfigurationError(f"unknown conditioning mode {conditioning!r}")
    if conditioning != "none":
        table = EmbeddingTable.create(conditioning, list(subjects), d, seed=int(rng.integers(2**31)))
    model = Model(cfg, extractor, head, conditioning, table, seed)
    if enforce_budget:
        check_budget(model)
    return model


def check_budget(model: Model) -> int:
    n = param_count(model, include_table=False)
    target = BUDGETS[model.config.arch]
    lo, hi = target * (1 - BUDGET_TOLERANCE), target * (1 + BUDGET_TOLERANCE)
    if not lo <= n <= hi:
        raise ConfigurationError(
            f"{model.config.arch}: {n} parameters outside budget [{lo:.0f}, {hi:.0f}]"
        )
    return n


def param_count(model, include_table: bool = True) -> int:
    if isinstance(model, Graph):
        return model.param_count()
    n = model.extractor.param_count() + model.head.param_count()
    if include_table and model.table is not None:
        n += model.table.rows.size
    return n


def as_input(x, dtype=np.float32) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    return x[:, None] if x.ndim == 3 else x


def _dtype(model: Model):
    return next(iter(model.extractor.params.values())).dtype


def extract_features(model: Model, x, train: bool = False, rng=None) -> np.ndarray:
    return ad.forward(model.extractor, as_input(x, _dtype(model)), train=train, rng=rng).activations[-1]


def logits_from_features(model: Model, h) -> np.ndarray:
    return ad.forward(model.head, np.asarray(h, dtype=_dtype(model))).activations[-1][:, 0]


def classify(model: Model, h_tilde) -> np.ndarray:
    """Sigmoid probabilities from (already conditioned) features."""
    h_tilde = np.asarray(h_tilde)
    if h_tilde.ndim != 2 or h_tilde.shape[1] != model.head.input_shape[0]:
        raise ConfigurationError(f"features {h_tilde.shape} do not match head input {model.head.input_shape}")
    z = logits_from_features(model, h_tilde).astype(np.float64)
    # clip keeps outputs strictly inside (0, 1)
    return np.clip(ad.sigmoid(z), 1e-12, 1 - 1e-12)


@dataclass
class ForwardState:
    extractor: ad.Trace
    head: ad.Trace
    cond_cache: tuple | None
    rows: np.ndarray | None


def condition(model: Model, h, subject_ids):
    if model.table is None:
        return h, None, None
    rows = model.table.rows_for(subject_ids)
    raw = model.table.rows[rows].astype(h.dtype)
    h_tilde, cache = conditioned_forward(model.conditioning, h, raw)
    return h_tilde.astype(h.dtype), cache, rows


def forward(model: Model, x, subject_ids=None, train: bool = False, rng=None):
    """Logits for a batch plus the state needed by :func:`backward`."""
    et = ad.forward(model.extractor, as_input(x, _dtype(model)), train=train, rng=rng)
    h_tilde, cache, rows = condition(model, et.activations[-1], subject_ids)
    ht = ad.forward(model.head, h_tilde, train=train)
    return ht.activations[-1][:, 0], ForwardState(et, ht, cache, rows)


def head_forward(model: Model, h, subject_ids=None):
    """Head-only forward from cached features (extractor frozen)."""
    h_tilde, cache, rows = condition(model, h, subject_ids)
    ht = ad.forward(model.head, h_tilde)
    return ht.activations[-1][:, 0], ForwardState(None, ht, cache, rows)


def backward(model: Model, state: ForwardState, dlogits, frozen=frozenset()):
    """Gradients of every parameter not in ``frozen`` (full names)."""
    dlogits = np.asarray(dlogits, dtype=state.head.activations[-1].dtype)[:, None]
    head_frozen = {k[5:] for k in frozen if k.startswith("head.")}
    need_h = state.extractor is not None and any(
        not k.startswith("head.") and k not in frozen for k in model.parameters()
    )
    need_h = need_h or ("table.rows" not in frozen and model.table is not None)
    hg, dh_tilde = ad.backward(model.head, state.head, dlogits, head_frozen, need_input_grad=need_h)
    grads = {f"head.{k}": v for k, v in hg.items()}
    if not need_h:
        return grads
    dh = dh_tilde
    if model.table is not None:
        dh, draw = conditioned_backward(model.conditioning, state.cond_cache, dh_tilde)
        if "table.rows" not in frozen:
            g = np.zeros(model.table.rows.shape, dtype=np.float64)
            np.add.at(g, state.rows, draw)
            grads["table.rows"] = g.astype(model.table.rows.dtype)
    if state.extractor is not None:
        ex_frozen = {k[10:] for k in frozen if k.startswith("extractor.")}
        if len(ex_frozen) < len(model.extractor.params):
            eg, _ = ad.backward(model.extractor, state.extractor, dh.astype(_dtype(model)), ex_frozen)
            grads.update({f"extractor.{k}": v for k, v in eg.items()})
    return grads


# --- serialisation -----------------------------------------------------------

def save_model(path, model: Model, extra: dict | None = None) -> None:
    tensors = {}
    for k, v in model.parameters().items():
        tensors[f"param:{k}"] = v
    for k, v in model.extractor.buffers.items():
        tensors[f"buffer:extractor.{k}"] = v
    header = {
        "architecture": model.config.arch,
        "config": model.config.to_dict(),
        "conditioning": model.conditioning,
        "layers": {"extractor": model.extractor.spec(), "head": model.head.spec()},
        "input_shape": list(model.extractor.input_shape),
        "table_subjects": None if model.table is None else model.table.subjects,
        "seeds": {"init": model.seed},
        "meta": model.meta,
        "extra": extra or {},
    }
    save_checkpoint(path, header, tensors)


def load_model(path) -> tuple[Model, dict]:
    header, tensors = load_checkpoint(path)
    cfg = ArchitectureConfig(**header["config"])
    layers = [ad.layer_from_spec(s) for s in header["layers"]["extractor"]]
    extractor = Graph(layers, tuple(header["input_shape"]))
    head = Graph([ad.layer_from_spec(s) for s in header["layers"]["head"]], extractor.output_shape)
    table = None
    for name, arr in tensors.items():
        kind, _, full = name.partition(":")
        group, _, local = full.partition(".")
        if kind == "buffer":
            extractor.buffers[local] = arr
        elif group == "table":
            table = EmbeddingTable(header["conditioning"], arr, header["table_subjects"])
        else:
            {"extractor": extractor, "head": head}[group].params[local] = arr
    model = Model(cfg, extractor, head, header["conditioning"], table,
                  header["seeds"]["init"], header.get("meta", {}))
    return model, header.get("extra", {})
