"""Shared-private multi-domain network.

One shared extractor, one private extractor per domain, a classifier over the
concatenated features (single head, or one head per domain), and a K-way
domain discriminator reading the shared features.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ParseError, ShapeError


@dataclass
class ModelConfig:
    input_dim: int
    shared_dim: int = 64
    private_dim: int = 64
    num_domains: int = 2
    num_classes: int = 2
    shared_classifier: bool = True
    init_seed: int = 0
    init_scale: float = 1.0
    depth: int = 1

    def validate(self):
        for name in ("input_dim", "shared_dim", "private_dim", "num_classes", "depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.num_domains < 2:
            raise ConfigError(f"model.num_domains must be >= 2, got {self.num_domains}")
        if self.init_scale <= 0:
            raise ConfigError("model.init_scale must be positive")


@dataclass
class Layer:
    w: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.w, self.b)


class ForwardOutput:
    """Intermediate tensors of one forward pass.

    ``class_probs`` and ``domain_logits`` are built on first access so that
    callers needing only the logits do not pay for extra graph nodes.
    """

    __slots__ = ("z_s", "z_d", "class_logits", "_model", "_probs", "_dlogits")

    def __init__(self, z_s: Tensor, z_d: Tensor, class_logits: Tensor, model=None):
        self.z_s = z_s
        self.z_d = z_d
        self.class_logits = class_logits
        self._model = model
        self._probs = None
        self._dlogits = None

    @property
    def class_probs(self) -> Tensor:
        if self._probs is None:
            self._probs = ad.softmax_rows(self.class_logits)
        return self._probs

    @property
    def domain_logits(self) -> Tensor:
        if self._dlogits is None:
            self._dlogits = discriminate(self._model, self.z_s)
        return self._dlogits


@dataclass
class SPModel:
    cfg: ModelConfig
    shared: list[Layer]
    private: list[list[Layer]]
    classifiers: list[Layer]
    discriminator: Layer
    _registry: dict[str, list[Tensor]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        reg = {"Fs": [t for l in self.shared for t in (l.w, l.b)]}
        for k, layers in enumerate(self.private):
            reg[f"Fd[{k}]"] = [t for l in layers for t in (l.w, l.b)]
        if self.cfg.shared_classifier:
            reg["C"] = [self.classifiers[0].w, self.classifiers[0].b]
        else:
            for k, head in enumerate(self.classifiers):
                reg[f"C[{k}]"] = [head.w, head.b]
        reg["D"] = [self.discriminator.w, self.discriminator.b]
        self._registry = reg

    @property
    def registry(self) -> dict[str, list[Tensor]]:
        """Trainable tensors keyed by component tag."""
        return self._registry

    def params(self, *groups: str) -> list[Tensor]:
        """Tensors of the named groups; ``"Fd"``/``"C"`` select every head."""
        if not groups:
            return [t for ts in self._registry.values() for t in ts]
        out = []
        for key, ts in self._registry.items():
            base = key.split("[")[0]
            if key in groups or base in groups:
                out.extend(ts)
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [(t.name, t) for ts in self._registry.values() for t in ts]

    def num_params(self) -> int:
        return sum(t.values.size for t in self.params())

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, t in self.named_params():
            v = state[name]
            if v.shape != t.values.shape:
                raise ShapeError(f"{name}: checkpoint shape {v.shape} != model shape {t.values.shape}")
            t.values = np.array(v, dtype=np.float64)

    def classifier_for(self, domain: int) -> Layer:
        return self.classifiers[0] if self.cfg.shared_classifier else self.classifiers[domain]


def _glorot(rng, fan_in, fan_out, scale, name):
    bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
    w = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=f"{name}.w")
    b = ad.parameter(np.zeros((1, fan_out)), name=f"{name}.b")
    return Layer(w, b)


def _stack(rng, cfg, in_dim, out_dim, name):
    layers = []
    for i in range(cfg.depth):
        layers.append(_glorot(rng, in_dim if i == 0 else out_dim, out_dim, cfg.init_scale, f"{name}.{i}"))
    return layers


def init_model(cfg: ModelConfig) -> SPModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.init_seed)
    shared = _stack(rng, cfg, cfg.input_dim, cfg.shared_dim, "Fs")
    private = [_stack(rng, cfg, cfg.input_dim, cfg.private_dim, f"Fd{k}") for k in range(cfg.num_domains)]
    width = cfg.shared_dim + cfg.private_dim
    n_heads = 1 if cfg.shared_classifier else cfg.num_domains
    if cfg.shared_classifier:
        heads = [_glorot(rng, width, cfg.num_classes, cfg.init_scale, "C")]
    else:
        heads = [_glorot(rng, width, cfg.num_classes, cfg.init_scale, f"C{k}") for k in range(n_heads)]
    disc = _glorot(rng, cfg.shared_dim, cfg.num_domains, cfg.init_scale, "D")
    return SPModel(cfg, shared, private, heads, disc)


def _extract(layers, x):
    h = x
    for layer in layers:
        h = ad.sigmoid(layer(h))
    return h


def shared_features(model: SPModel, x: Tensor) -> Tensor:
    return _extract(model.shared, x)


def private_features(model: SPModel, x: Tensor, domain: int) -> Tensor:
    _check_domain(model, domain)
    return _extract(model.private[domain], x)


def discriminate(model: SPModel, z_s: Tensor) -> Tensor:
    return model.discriminator(z_s)


def _check_domain(model, domain):
    if not 0 <= domain < model.cfg.num_domains:
        raise IndexError(f"domain {domain} out of range for {model.cfg.num_domains} domains")


def forward(model: SPModel, x, domain: int) -> ForwardOutput:
    _check_domain(model, domain)
    x = x if isinstance(x, Tensor) else ad.constant(np.asarray(x, dtype=np.float64).reshape(-1, model.cfg.input_dim))
    if x.shape[1] != model.cfg.input_dim:
        raise ShapeError(f"input width {x.shape[1]} != model input_dim {model.cfg.input_dim}")
    z_s = shared_features(model, x)
    z_d = private_features(model, x, domain)
    logits = model.classifier_for(domain)(ad.concat_cols(z_s, z_d))
    return ForwardOutput(z_s, z_d, logits, model)


def detach_shared(output: ForwardOutput) -> Tensor:
    return output.z_s.detach()


def predict_proba(model: SPModel, x: np.ndarray, domain: int) -> np.ndarray:
    return forward(model, ad.constant(x), domain).class_probs.values


# ---------------------------------------------------------------------------
# checkpoint format: 8-byte little-endian header length, UTF-8 JSON header,
# then every tensor as little-endian float64 in header order
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "mdcl-checkpoint-v1"


def save_checkpoint(model: SPModel, path):
    named = model.named_params()
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "tensors": [{"name": n, "shape": list(t.values.shape)} for n, t in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> SPModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ParseError(path, 0, "checkpoint truncated before the header length")
    (hlen,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(path, 0, f"bad checkpoint header ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(path, 0, f"unknown checkpoint format {header.get('format')!r}")
    expected = 8 + hlen + 8 * sum(int(np.prod(t["shape"])) for t in header["tensors"])
    if len(raw) != expected:
        raise ParseError(path, 0, f"checkpoint has {len(raw)} bytes, header implies {expected}")
    model = init_model(ModelConfig(**header["config"]))
    offset = 8 + hlen
    state = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        state[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    model.load_state(state)
    return model
