"""Network pieces, composite losses, target inference and model files.

Naming follows the component layout: a shared feature extractor ``h_f``,
a fine-grained head (bottleneck + pseudo class/state classifier + domain
classifier), a temporal-state head (bottleneck + state classifier + class
and domain discriminators behind gradient reversal) and a cross-user head
(bottleneck + state classifier + source-class classifier + domain
discriminator behind gradient reversal).
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Value

log = logging.getLogger(__name__)


class ModelFileError(ValueError):
    """Corrupt model file or one that does not fit the target architecture."""


class UntrainedModelError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# layers


class Module:
    training = True

    def children(self) -> Iterator["Module"]:
        for v in vars(self).values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                yield from (m for m in v if isinstance(m, Module))

    def parameters(self) -> list[Parameter]:
        out = [v for v in vars(self).values() if isinstance(v, Parameter)]
        for m in self.children():
            out.extend(m.parameters())
        return out

    def batchnorms(self) -> list["BatchNorm"]:
        out = [self] if isinstance(self, BatchNorm) else []
        for m in self.children():
            out.extend(m.batchnorms())
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for m in self.children():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.n_out = n_out
        self.weight = Parameter(_uniform(rng, (n_out, n_in), n_in), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), f"{name}.bias")

    def __call__(self, x: Value) -> Value:
        return ad.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, padding: int, rng: np.random.Generator, name: str):
        self.padding = padding
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel), c_in * kernel), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")

    def __call__(self, x: Value) -> Value:
        return ad.conv1d(x, self.weight, self.bias, 1, self.padding)


class BatchNorm(Module):
    def __init__(self, n: int, name: str):
        self.name = name
        self.gamma = Parameter(np.ones(n), f"{name}.gamma")
        self.beta = Parameter(np.zeros(n), f"{name}.beta")
        self.state = BatchNormState.create(n)

    def __call__(self, x: Value, update_stats: bool = True) -> Value:
        mode = "train" if self.training else "eval"
        return ad.batchnorm1d(x, self.gamma, self.beta, self.state, mode, update_stats)


class Bottleneck(Module):
    """linear -> batchnorm"""

    def __init__(self, n_in: int, width: int, rng, name: str):
        self.fc = Linear(n_in, width, rng, f"{name}.fc")
        self.bn = BatchNorm(width, f"{name}.bn")

    def __call__(self, x: Value, update_stats: bool = True) -> Value:
        return self.bn(self.fc(x), update_stats)


class Discriminator(Module):
    """(linear -> bn -> relu) x 2 -> linear"""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng, name: str):
        self.n_out = n_out
        self.fc1 = Linear(n_in, hidden, rng, f"{name}.fc1")
        self.bn1 = BatchNorm(hidden, f"{name}.bn1")
        self.fc2 = Linear(hidden, hidden, rng, f"{name}.fc2")
        self.bn2 = BatchNorm(hidden, f"{name}.bn2")
        self.out = Linear(hidden, n_out, rng, f"{name}.out")

    def __call__(self, x: Value) -> Value:
        h = ad.relu(self.bn1(self.fc1(x)))
        h = ad.relu(self.bn2(self.fc2(h)))
        return self.out(h)


class FeatureExtractor(Module):
    """Two conv blocks: conv1d -> batchnorm -> relu -> maxpool(2, 2), then flatten."""

    def __init__(self, in_channels: int, window_len: int, channels=(32, 64), kernel: int = 5, rng=None,
                 name: str = "feature_extractor"):
        if window_len % 4:
            raise ValueError(f"window_len {window_len} is not divisible by 4; pad the windows first")
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.window_len = window_len
        c1, c2 = channels
        self.conv1 = Conv1d(in_channels, c1, kernel, kernel // 2, rng, f"{name}.conv1")
        self.bn1 = BatchNorm(c1, f"{name}.bn1")
        self.conv2 = Conv1d(c1, c2, kernel, kernel // 2, rng, f"{name}.conv2")
        self.bn2 = BatchNorm(c2, f"{name}.bn2")
        self.out_dim = c2 * (window_len // 4)

    def __call__(self, x: Value, update_stats: bool = True) -> Value:
        if x.shape[1:] != (self.in_channels, self.window_len):
            raise ValueError(
                f"expected windows of shape {(self.in_channels, self.window_len)}, got {x.shape[1:]}"
            )
        h = ad.maxpool1d(ad.relu(self.bn1(self.conv1(x), update_stats)), 2, 2)
        h = ad.maxpool1d(ad.relu(self.bn2(self.conv2(h), update_stats)), 2, 2)
        return ad.flatten(h)


class FineGrainedHead(Module):
    def __init__(self, n_in: int, num_classes: int, num_states: int, width: int, rng, name: str = "fine_grained"):
        self.bottleneck = Bottleneck(n_in, width, rng, f"{name}.bottleneck")
        self.pseudo_classifier = Linear(width, num_states * 2 * num_classes, rng, f"{name}.pseudo_classifier")
        self.domain_classifier = Linear(width, 2, rng, f"{name}.domain_classifier")


class TemporalStateHead(Module):
    def __init__(self, n_in: int, num_classes: int, num_states: int, width: int, hidden: int, rng,
                 name: str = "temporal_state"):
        self.bottleneck = Bottleneck(n_in, width, rng, f"{name}.bottleneck")
        self.state_classifier = Linear(width, num_states, rng, f"{name}.state_classifier")
        self.class_discriminator = Discriminator(width, hidden, 2 * num_classes, rng, f"{name}.class_discriminator")
        self.domain_discriminator = Discriminator(width, hidden, 2, rng, f"{name}.domain_discriminator")


class CrossUserHead(Module):
    def __init__(self, n_in: int, num_classes: int, num_states: int, width: int, hidden: int, rng,
                 name: str = "cross_user"):
        self.bottleneck = Bottleneck(n_in, width, rng, f"{name}.bottleneck")
        self.state_classifier = Linear(width, num_states, rng, f"{name}.state_classifier")
        self.class_classifier = Linear(width, num_classes, rng, f"{name}.class_classifier")
        self.domain_discriminator = Discriminator(width, hidden, 2, rng, f"{name}.domain_discriminator")


@dataclass(frozen=True)
class Architecture:
    in_channels: int
    window_len: int
    num_classes: int
    num_states: int
    conv_channels: tuple[int, int] = (32, 64)
    kernel: int = 5
    bottleneck: int = 64
    hidden: int = 64

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class DTSDAModel(Module):
    """All four pieces sharing one feature extractor."""

    def __init__(self, arch: Architecture, seed: int = 0):
        if arch.num_states < 1 or arch.num_classes < 1:
            raise ValueError("need at least one class and one state")
        rng = np.random.default_rng(seed)
        self.arch = arch
        C, T = arch.num_classes, arch.num_states
        self.feature_extractor = FeatureExtractor(arch.in_channels, arch.window_len, arch.conv_channels, arch.kernel, rng)
        d = self.feature_extractor.out_dim
        self.fine_grained = FineGrainedHead(d, C, T, arch.bottleneck, rng)
        self.temporal_state = TemporalStateHead(d, C, T, arch.bottleneck, arch.hidden, rng)
        self.cross_user = CrossUserHead(d, C, T, arch.bottleneck, arch.hidden, rng)
        self.channel_mean = np.zeros(arch.in_channels)
        self.channel_std = np.ones(arch.in_channels)
        self.trained = False
        self._check_widths()
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def _check_widths(self) -> None:
        C, T = self.arch.num_classes, self.arch.num_states
        assert self.fine_grained.pseudo_classifier.n_out == T * 2 * C
        assert self.fine_grained.domain_classifier.n_out == 2
        assert self.temporal_state.state_classifier.n_out == T
        assert self.temporal_state.class_discriminator.n_out == 2 * C
        assert self.temporal_state.domain_discriminator.n_out == 2
        assert self.cross_user.state_classifier.n_out == T
        assert self.cross_user.class_classifier.n_out == C
        assert self.cross_user.domain_discriminator.n_out == 2

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Parameters, batchnorm running statistics and input normalisation stats."""
        out = {p.name: p.data for p in self.parameters()}
        for bn in self.batchnorms():
            out[f"{bn.name}.running_mean"] = bn.state.running_mean
            out[f"{bn.name}.running_var"] = bn.state.running_var
        out["input.channel_mean"] = self.channel_mean
        out["input.channel_std"] = self.channel_std
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        mine = self.named_tensors()
        if set(mine) != set(tensors):
            missing, extra = sorted(set(mine) - set(tensors)), sorted(set(tensors) - set(mine))
            raise ModelFileError(f"tensor name mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in tensors.items():
            if arr.shape != mine[name].shape:
                raise ModelFileError(f"shape mismatch for {name}: file {arr.shape}, model {mine[name].shape}")
        params = {p.name: p for p in self.parameters()}
        bns = {bn.name: bn for bn in self.batchnorms()}
        for name, arr in tensors.items():
            if name in params:
                params[name].data = arr.copy()
            elif name.startswith("input."):
                setattr(self, name.split(".", 1)[1], arr.copy())
            else:
                bn_name, stat = name.rsplit(".", 1)
                setattr(bns[bn_name].state, stat, arr.copy())


# ----------------------------------------------------------------------------
# forward paths


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def extract_features(model: DTSDAModel, x, update_stats: bool = True) -> Value:
    """``h_f(x)`` with the extractor's current train/eval mode."""
    return model.feature_extractor(_as_value(x), update_stats)


@contextlib.contextmanager
def evaluating(model: Module):
    prev = model.training
    model.eval()
    try:
        with ad.no_grad():
            yield model
    finally:
        model.train(prev)


def features_eval(model: DTSDAModel, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode ``h_f`` over a large array, chunked."""
    with evaluating(model):
        return np.concatenate(
            [extract_features(model, x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        )


def temporal_bottleneck_eval(model: DTSDAModel, feats: np.ndarray) -> np.ndarray:
    with evaluating(model):
        return model.temporal_state.bottleneck(Value(feats)).data


def temporal_state_probs_eval(model: DTSDAModel, feats: np.ndarray) -> np.ndarray:
    """Softmax of the temporal-state classifier on ``h_f`` features."""
    with evaluating(model):
        head = model.temporal_state
        return ad.softmax(head.state_classifier(head.bottleneck(Value(feats))).data)


# ----------------------------------------------------------------------------
# composite losses


@dataclass
class LossTerms:
    total: Value
    terms: dict[str, float]

    def item(self) -> float:
        return self.total.item()


def fine_grained_loss(model: DTSDAModel, x, pseudo_labels, domains) -> LossTerms:
    """Pseudo class/state cross-entropy plus domain cross-entropy, through ``h_f``.

    No gradient reversal here: this head is trained to tell users,
    classes and states apart.
    """
    K = model.fine_grained.pseudo_classifier.n_out
    pseudo_labels = np.asarray(pseudo_labels)
    if pseudo_labels.max() >= K:
        raise ValueError(f"pseudo label outside [0, {K})")
    head = model.fine_grained
    b = head.bottleneck(extract_features(model, x))
    l_p = ad.softmax_cross_entropy(head.pseudo_classifier(b), pseudo_labels)
    l_d = ad.softmax_cross_entropy(head.domain_classifier(b), np.asarray(domains))
    return LossTerms(ad.add(l_p, l_d), {"pseudo": l_p.item(), "domain": l_d.item()})


def temporal_component_loss(model: DTSDAModel, feats, ts, classes, domains, lam: float) -> LossTerms:
    """State cross-entropy plus class and domain cross-entropies behind gradient reversal.

    ``feats`` is the ``h_f`` output for the batch (a Value, or an array
    when the extractor is frozen).
    """
    ts = np.asarray(ts)
    T = model.arch.num_states
    if ts.max() >= T or ts.min() < 0:
        raise ValueError(f"temporal state outside [0, {T}); relabel before this phase")
    head = model.temporal_state
    b = head.bottleneck(_as_value(feats))
    l_t = ad.softmax_cross_entropy(head.state_classifier(b), ts)
    r = ad.gradient_reversal(b, lam)
    l_c = ad.softmax_cross_entropy(head.class_discriminator(r), np.asarray(classes))
    l_d = ad.softmax_cross_entropy(head.domain_discriminator(r), np.asarray(domains))
    total = ad.add(ad.add(l_t, l_c), l_d)
    return LossTerms(total, {"state": l_t.item(), "class": l_c.item(), "domain": l_d.item()})


def cross_user_loss(model: DTSDAModel, feats, ts, classes, domains, lam: float) -> LossTerms:
    """State cross-entropy on all windows, class cross-entropy on source windows
    only, and domain cross-entropy behind gradient reversal."""
    domains = np.asarray(domains)
    classes = np.asarray(classes)
    head = model.cross_user
    b = head.bottleneck(_as_value(feats))
    l_t = ad.softmax_cross_entropy(head.state_classifier(b), np.asarray(ts))
    l_d = ad.softmax_cross_entropy(head.domain_discriminator(ad.gradient_reversal(b, lam)), domains)
    total = ad.add(l_t, l_d)
    terms = {"state": l_t.item(), "domain": l_d.item(), "class": 0.0}
    src = np.flatnonzero(domains == 0)
    if len(src):
        l_c = ad.softmax_cross_entropy(head.class_classifier(ad.take_rows(b, src)), classes[src])
        total = ad.add(total, l_c)
        terms["class"] = l_c.item()
    else:
        log.warning("cross_user_loss: batch has no source windows; class term skipped")
    return LossTerms(total, terms)


# ----------------------------------------------------------------------------
# inference


def class_logits(model: DTSDAModel, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    with evaluating(model):
        head = model.cross_user
        out = []
        for i in range(0, len(x), batch_size):
            f = extract_features(model, x[i : i + batch_size])
            out.append(head.class_classifier(head.bottleneck(f)).data)
    return np.concatenate(out)


def predict_target(model: DTSDAModel, x: np.ndarray) -> np.ndarray:
    """Class in ``[0, C)`` from ``h_f`` -> cross-user bottleneck -> source-class classifier."""
    if not model.trained:
        raise UntrainedModelError("model has not been trained or loaded")
    return class_logits(model, np.asarray(x, dtype=np.float64)).argmax(axis=1)


# ----------------------------------------------------------------------------
# model files
#
#   magic "DTSDAMD1" | u32 header length | JSON header | float64 LE tensors | sha256 of all preceding bytes

MAGIC = b"DTSDAMD1"


def save_model(model: DTSDAModel, path: str | Path, extra: dict | None = None) -> None:
    tensors = model.named_tensors()
    index, offset = [], 0
    for name, arr in tensors.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "architecture": asdict(model.arch),
        "architecture_hash": model.arch.digest(),
        "num_classes": model.arch.num_classes,
        "num_states": model.arch.num_states,
        "channels": model.arch.in_channels,
        "window_len": model.arch.window_len,
        "channel_mean": [float(v) for v in model.channel_mean],
        "channel_std": [float(v) for v in model.channel_std],
        "tensors": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes
    body += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_model_file(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + 32 or not raw.startswith(MAGIC):
        raise ModelFileError(f"{path}: not a model file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFileError(f"{path}: checksum mismatch (truncated or corrupted)")
    (hlen,) = struct.unpack("<I", body[8:12])
    header = json.loads(body[12 : 12 + hlen])
    data = body[12 + hlen :]
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        tensors[t["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"]).astype(np.float64)
    return header, tensors


def load_model(path: str | Path, model: DTSDAModel | None = None) -> tuple[DTSDAModel, dict]:
    """Read a model file, into ``model`` when given (shapes must match) or into a fresh one."""
    header, tensors = read_model_file(path)
    if model is None:
        arch = header["architecture"]
        arch["conv_channels"] = tuple(arch["conv_channels"])
        model = DTSDAModel(Architecture(**arch))
    model.load_tensors(tensors)
    model.trained = True
    return model, header
