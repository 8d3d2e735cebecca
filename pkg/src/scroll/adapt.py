"""Stage-two predictor adaptation on replay data.

Starting from the stage-one linear head, a small residual bottleneck
``g(z) = z + V relu(U z)`` is trained jointly with the head on the replay
buffer only, using a temperature-scaled cross-entropy loss. ``V`` starts
at zero, so before the first optimizer step the adapted predictor is
function-identical to the stage-one predictor. Every adaptation call
restarts from that point; nothing is warm-started from a previous
adapted model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._binio import Reader, Writer
from ._seeding import seeded_rng
from .errors import AdaptError, ConfigError, FormatError, ShapeError
from .learners import LinearHead, NccState, RidgeState

ADAPT_MODES = ("none", "adapter", "full_head")
OPTIMIZERS = ("sgd", "adadelta")

PREDICTOR_MAGIC = b"SCAD"
PREDICTOR_VERSION = 1


@dataclass(frozen=True)
class AdaptConfig:
    """Hyper-parameters for replay adaptation.

    ``mode`` selects what is trained: nothing (``none``), the residual
    bottleneck plus head (``adapter``), or the head alone (``full_head``).
    ``threshold`` is the buffer size at which one would switch from the
    adapter to head-only tuning; the mode stays explicit and a mismatch
    only produces a warning. ``init_kind`` chooses the head
    initialization: ``auto`` converts the stage-one classifier, ``random``
    draws a fresh head from the seed.
    """

    mode: str = "none"
    epochs: int = 40
    batch_size: int = 50
    lr_head: float = 0.1
    lr_adapter: float = 0.01
    temperature: float = 2.0
    optimizer: str = "adadelta"
    rho: float = 0.95
    eps: float = 1e-6
    threshold: int = 500
    bottleneck: int | None = None
    init_kind: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ADAPT_MODES:
            raise ConfigError(f"unknown adapt mode {self.mode!r}, expected {ADAPT_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}, expected {OPTIMIZERS}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_head < 0 or self.lr_adapter < 0:
            raise ConfigError("learning rates must be non-negative")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.rho < 1:
            raise ConfigError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.threshold < 0:
            raise ConfigError("threshold must be >= 0")
        if self.bottleneck is not None and self.bottleneck < 1:
            raise ConfigError("bottleneck width must be >= 1 when given")
        if self.init_kind not in ("auto", "random"):
            raise ConfigError(f"init_kind must be 'auto' or 'random', got {self.init_kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        if not isinstance(d, dict):
            raise ConfigError("adapt config must be an object")
        known = {
            "mode", "epochs", "batch_size", "lr_head", "lr_adapter", "temperature",
            "optimizer", "rho", "eps", "threshold", "bottleneck", "init_kind", "seed",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown adapt fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid adapt config: {exc}") from None

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_head": self.lr_head,
            "lr_adapter": self.lr_adapter,
            "temperature": self.temperature,
            "optimizer": self.optimizer,
            "rho": self.rho,
            "eps": self.eps,
            "threshold": self.threshold,
            "init_kind": self.init_kind,
            "seed": self.seed,
        }
        if self.bottleneck is not None:
            out["bottleneck"] = self.bottleneck
        return out


class AdapterParams:
    """Residual bottleneck weights plus the linear head they feed."""

    def __init__(self, down: np.ndarray, up: np.ndarray, head: LinearHead):
        down = np.ascontiguousarray(down, dtype=np.float64)
        up = np.ascontiguousarray(up, dtype=np.float64)
        if down.ndim != 2 or up.shape != (down.shape[1], down.shape[0]):
            raise ShapeError(
                f"adapter shapes disagree: down {down.shape}, up {up.shape}"
            )
        if head.dim != down.shape[1]:
            raise ShapeError(
                f"head expects dim {head.dim}, adapter works on dim {down.shape[1]}"
            )
        self.down = down
        self.up = up
        self.head = head

    @property
    def width(self) -> int:
        return self.down.shape[0]

    @property
    def dim(self) -> int:
        return self.down.shape[1]

    def transform(self, zs: np.ndarray) -> np.ndarray:
        """Apply g(z) = z + V relu(U z) row-wise."""
        return zs + np.maximum(zs @ self.down.T, 0.0) @ self.up.T

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.down.copy(), self.up.copy(), self.head.copy())


def init_adapter(head: LinearHead, width: int | None, seed: int) -> AdapterParams:
    """Fresh adapter around a head: small random down projection, zero up.

    With the up projection at zero the residual branch contributes
    nothing, so the new predictor starts exactly at the head's function.
    """
    dim = head.dim
    h = max(1, dim // 4) if width is None else int(width)
    scale = 1.0 / np.sqrt(dim)
    down = seeded_rng(seed, 31).uniform(-scale, scale, size=(h, dim))
    return AdapterParams(down, np.zeros((dim, h)), head.copy())


def init_head(
    kind: str,
    state: NccState | RidgeState | None = None,
    *,
    class_count: int | None = None,
    dim: int | None = None,
    seed: int = 0,
) -> LinearHead:
    """Build the head that adaptation starts from.

    ``random`` draws entries i.i.d. uniform in [-1/sqrt(d), 1/sqrt(d)]
    with zero biases; ``ncc`` converts prototype statistics; ``ridge``
    solves the accumulated system.
    """
    if kind == "random":
        if class_count is None or dim is None:
            raise AdaptError("random head initialization needs class_count and dim")
        scale = 1.0 / np.sqrt(dim)
        weights = seeded_rng(seed, 32).uniform(-scale, scale, size=(class_count, dim))
        return LinearHead(weights, np.zeros(class_count))
    if kind == "ncc":
        if not isinstance(state, NccState):
            raise AdaptError("ncc head initialization needs prototype statistics")
        return state.to_linear_head()
    if kind == "ridge":
        if not isinstance(state, RidgeState):
            raise AdaptError("ridge head initialization needs ridge statistics")
        return state.solve()
    raise ConfigError(f"unknown head initialization {kind!r}")


def forward(params: AdapterParams, zs) -> tuple[np.ndarray, dict]:
    """Adapter + head forward pass.

    Returns the logits and the intermediate activations needed by
    :func:`loss_and_grads`. Accepts a single row or a batch.
    """
    zs = np.asarray(zs, dtype=np.float64)
    single = zs.ndim == 1
    if single:
        zs = zs[None, :]
    if zs.ndim != 2 or zs.shape[1] != params.dim:
        raise ShapeError(f"expected rows of dimension {params.dim}, got {zs.shape}")
    pre = zs @ params.down.T
    act = np.maximum(pre, 0.0)
    feat = zs + act @ params.up.T
    logits = feat @ params.head.weights.T + params.head.biases
    cache = {"zs": zs, "pre": pre, "act": act, "feat": feat}
    return (logits[0] if single else logits), cache


def loss_and_grads(
    params: AdapterParams, zs, ys, temperature: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean temperature-scaled cross-entropy and its exact gradients.

    The loss is ``mean(-log softmax(logits / temperature)[y])`` over the
    batch; gradients are returned for the adapter projections (``down``,
    ``up``) and the head (``weights``, ``biases``).
    """
    ys = np.asarray(ys, dtype=np.int64)
    if ys.ndim != 1 or ys.shape[0] == 0:
        raise ConfigError("batch must contain at least one sample")
    logits, cache = forward(params, zs)
    if logits.ndim == 1:
        logits = logits[None, :]
    if ys.shape[0] != logits.shape[0]:
        raise ShapeError("labels and batch rows disagree in length")
    scaled = logits / temperature
    scaled -= scaled.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(scaled).sum(axis=1))
    loss = float(np.mean(log_z - scaled[np.arange(len(ys)), ys]))

    batch = len(ys)
    probs = np.exp(scaled - log_z[:, None])
    dlogits = probs
    dlogits[np.arange(batch), ys] -= 1.0
    dlogits /= batch * temperature

    feat, act, pre, z_in = cache["feat"], cache["act"], cache["pre"], cache["zs"]
    d_weights = dlogits.T @ feat
    d_biases = dlogits.sum(axis=0)
    d_feat = dlogits @ params.head.weights
    d_up = d_feat.T @ act
    d_act = d_feat @ params.up
    d_pre = d_act * (pre > 0.0)
    d_down = d_pre.T @ z_in
    return loss, {"down": d_down, "up": d_up, "weights": d_weights, "biases": d_biases}


def adadelta_step(
    param: np.ndarray,
    grad: np.ndarray,
    accum_grad_sq: np.ndarray,
    accum_step_sq: np.ndarray,
    rho: float,
    eps: float,
    lr: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One accumulate-and-rescale update.

    Keeps decayed averages of squared gradients and squared steps; the
    step is the gradient rescaled by the root ratio of the two averages,
    which makes early update magnitudes insensitive to gradient scale.
    Returns the new parameter and both updated accumulators.
    """
    if not 0 < rho < 1:
        raise ConfigError(f"rho must lie in (0, 1), got {rho}")
    new_grad_sq = rho * accum_grad_sq + (1.0 - rho) * grad * grad
    step = -np.sqrt(accum_step_sq + eps) / np.sqrt(new_grad_sq + eps) * grad
    new_step_sq = rho * accum_step_sq + (1.0 - rho) * step * step
    return param + lr * step, new_grad_sq, new_step_sq


class AdaptedPredictor:
    """Final predictor: an optional embedding adapter feeding a linear head."""

    def __init__(
        self,
        head: LinearHead,
        adapter: AdapterParams | None = None,
        provenance: dict | None = None,
        curve: list[tuple[int, float, float]] | None = None,
        warnings: list[str] | None = None,
    ):
        self.head = head
        self.adapter = adapter
        self.provenance = provenance or {}
        self.curve = curve or []
        self.warnings = warnings or []

    def predict_batch(self, zs) -> np.ndarray:
        zs = np.asarray(zs, dtype=np.float64)
        if self.adapter is not None:
            zs = self.adapter.transform(zs)
        return self.head.predict_batch(zs)

    def predict(self, z) -> int:
        return int(self.predict_batch(np.asarray(z, dtype=np.float64)[None, :])[0])


def adapt(
    init: LinearHead, buffer, cfg: AdaptConfig, init_kind: str = "auto"
) -> AdaptedPredictor:
    """Train a predictor on the replay buffer, starting from ``init``.

    ``none`` returns the head untouched. ``adapter`` trains the residual
    bottleneck and the head with separate learning rates; ``full_head``
    trains the head only. Minibatches are drawn without replacement with
    seeded shuffling, so the result is a pure function of its inputs.
    """
    zs, ys = buffer.training_arrays()
    if zs.shape[0] == 0:
        raise AdaptError("replay buffer is empty; nothing to adapt on")
    provenance = {"init": init_kind, "buffer": buffer.content_digest()}
    warnings: list[str] = []
    stored = zs.shape[0]
    if cfg.mode == "adapter" and stored > cfg.threshold:
        warnings.append(
            f"buffer holds {stored} > threshold {cfg.threshold}; "
            "head-only tuning would normally take over"
        )
    elif cfg.mode == "full_head" and stored <= cfg.threshold:
        warnings.append(
            f"buffer holds {stored} <= threshold {cfg.threshold}; "
            "the adapter would normally be used"
        )
    if cfg.mode == "none":
        return AdaptedPredictor(init.copy(), provenance=provenance, warnings=warnings)

    params = init_adapter(init, cfg.bottleneck, cfg.seed)
    if cfg.mode == "full_head":
        trained = {"weights", "biases"}
    else:
        trained = {"weights", "biases", "down", "up"}
    rates = {
        "weights": cfg.lr_head,
        "biases": cfg.lr_head,
        "down": cfg.lr_adapter,
        "up": cfg.lr_adapter,
    }
    tensors = {
        "weights": params.head.weights,
        "biases": params.head.biases,
        "down": params.down,
        "up": params.up,
    }
    slots = {name: (np.zeros_like(t), np.zeros_like(t)) for name, t in tensors.items()}

    rng = seeded_rng(cfg.seed, 33)
    curve: list[tuple[int, float, float]] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(stored)
        epoch_loss = 0.0
        for lo in range(0, stored, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            loss, grads = loss_and_grads(params, zs[sel], ys[sel], cfg.temperature)
            epoch_loss += loss * len(sel)
            for name in trained:
                if cfg.optimizer == "sgd":
                    tensors[name] = tensors[name] - rates[name] * grads[name]
                else:
                    g2, s2 = slots[name]
                    tensors[name], g2, s2 = adadelta_step(
                        tensors[name], grads[name], g2, s2, cfg.rho, cfg.eps, rates[name]
                    )
                    slots[name] = (g2, s2)
            params = AdapterParams(
                tensors["down"], tensors["up"],
                LinearHead(tensors["weights"], tensors["biases"]),
            )
        predictor = AdaptedPredictor(params.head, params)
        buffer_acc = float(np.mean(predictor.predict_batch(zs) == ys))
        curve.append((epoch, epoch_loss / stored, buffer_acc))

    mode_adapter = params if cfg.mode == "adapter" else None
    head = params.head
    return AdaptedPredictor(
        head, mode_adapter, provenance=provenance, curve=curve, warnings=warnings
    )


def write_training_curve(curve, path) -> None:
    """Emit per-epoch training progress as ``epoch,loss,buffer_acc``."""
    with open(path, "w", newline="") as fh:
        fh.write("epoch,loss,buffer_acc\n")
        for epoch, loss, acc in curve:
            fh.write(f"{epoch},{loss!r},{acc!r}\n")


def save_predictor(pred: AdaptedPredictor, path) -> None:
    """Write an adapted-predictor checkpoint (magic ``SCAD``)."""
    w = Writer()
    w.raw(PREDICTOR_MAGIC)
    k, d = pred.head.weights.shape
    h = pred.adapter.width if pred.adapter is not None else 0
    w.pack("HBIII", PREDICTOR_VERSION, 1 if pred.adapter else 0, k, d, h)
    w.array(pred.head.weights, "<f8")
    w.array(pred.head.biases, "<f8")
    if pred.adapter is not None:
        w.array(pred.adapter.down, "<f8")
        w.array(pred.adapter.up, "<f8")
    blob = json.dumps(pred.provenance, sort_keys=True).encode()
    w.pack("I", len(blob))
    w.raw(blob)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_predictor(path) -> AdaptedPredictor:
    """Read back a checkpoint written by :func:`save_predictor`."""
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.expect_magic(PREDICTOR_MAGIC)
    version, has_adapter, k, d, h = r.unpack("HBIII", "predictor header")
    if version != PREDICTOR_VERSION:
        raise FormatError(f"unsupported predictor version {version}")
    weights = r.array("<f8", k * d, "head weights").reshape(k, d).copy()
    biases = r.array("<f8", k, "head biases").copy()
    head = LinearHead(weights, biases)
    adapter = None
    if has_adapter:
        down = r.array("<f8", h * d, "down projection").reshape(h, d).copy()
        up = r.array("<f8", d * h, "up projection").reshape(d, h).copy()
        adapter = AdapterParams(down, up, head)
    (blob_len,) = r.unpack("I", "provenance length")
    provenance = json.loads(r.take(blob_len, "provenance"))
    r.expect_end()
    return AdaptedPredictor(head, adapter, provenance=provenance)
