"""MLP noise predictor with a bottleneck, one skip connection and a projection head.

Layout of one forward pass (``silu`` everywhere)::

    a1 = x W_in + b_in + temb(t) W_time + b_time + E[y]      (E has C+1 rows, row C = null label)
    h1 = silu(a1);  h2 = silu(h1 W_enc + b_enc)              (h2 feeds the skip connection)
    h  = silu(h2 W_bn + b_bn)                                 (bottleneck)
    z  = normalize(h W_proj + b_proj)                         (projection head, unit L2 norm)
    eps_hat = [silu(h W_dec + b_dec), h2] W_out + b_out

All arithmetic is float64; gradients are exact reverse-mode derivatives.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from coral.losses import diffusion_loss, diffusion_loss_grad, supcon_loss

NULL_LABEL = -1
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str, detail: str = ""):
        super().__init__(f"non-finite values in {where}" + (f" ({detail})" if detail else ""))
        self.where = where


class DegenerateEmbeddingError(ValueError):
    """The projection head produced a zero vector, which has no direction to normalize."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    dim: int
    num_classes: int
    hidden: int = 64
    bottleneck: int = 16
    proj_dim: int = 8
    time_embed_dim: int = 32

    def __post_init__(self):
        for name in ("dim", "num_classes", "hidden", "bottleneck", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, h, b, p = self.dim, self.hidden, self.bottleneck, self.proj_dim
        return {
            "in.W": (d, h), "in.b": (h,),
            "time.W": (self.time_embed_dim, h), "time.b": (h,),
            "class_embed": (self.num_classes + 1, h),
            "enc.W": (h, h), "enc.b": (h,),
            "bottleneck.W": (h, b), "bottleneck.b": (b,),
            "dec.W": (b, h), "dec.b": (h,),
            "out.W": (2 * h, d), "out.b": (d,),
            "proj.W": (b, p), "proj.b": (p,),
        }

    def parameter_count(self) -> int:
        return sum(math.prod(s) for s in self.shapes().values())


@dataclass
class DenoiserModel:
    arch: ArchConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    def check_shapes(self) -> None:
        for name, shape in self.arch.shapes().items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {shape}")


@dataclass
class ForwardTrace:
    eps_hat: np.ndarray
    h_bottleneck: np.ndarray
    z: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def init_model(arch: ArchConfig, rng: np.random.Generator) -> DenoiserModel:
    """Weights ~ N(0, 1/fan_in), biases zero. The class table is treated as a one-hot layer (fan_in 1)."""
    params = {}
    for name, shape in arch.shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name == "class_embed":
            params[name] = rng.standard_normal(shape)
        else:
            params[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return DenoiserModel(arch, params)


def zeros_like_params(model: DenoiserModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def time_features(t, width: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if width % 2:
        feats = np.concatenate([feats, np.zeros((t.size, 1))], axis=1)
    return feats


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _check(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(where)


def _label_rows(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if np.any((y >= num_classes) | (y < NULL_LABEL)):
        raise ValueError(f"labels must be in 0..{num_classes - 1} or NULL_LABEL")
    return np.where(y == NULL_LABEL, num_classes, y)


def forward_batch(model: DenoiserModel, x_t, t, y, schedule=None) -> ForwardTrace:
    """Batched forward pass; ``x_t`` is ``[B, dim]``, ``t`` and ``y`` have length ``B``.

    ``y`` uses :data:`NULL_LABEL` for the unconditional branch.
    """
    p = model.params
    arch = model.arch
    x = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t)
    if schedule is not None and (np.any(t < 0) or np.any(t > schedule.T)):
        raise ValueError(f"timestep outside 0..{schedule.T}")
    rows = _label_rows(y, arch.num_classes)
    temb = time_features(t, arch.time_embed_dim)

    a1 = x @ p["in.W"] + p["in.b"] + temb @ p["time.W"] + p["time.b"] + p["class_embed"][rows]
    _check(a1, "input layer")
    h1 = _silu(a1)
    a2 = h1 @ p["enc.W"] + p["enc.b"]
    _check(a2, "encoder layer")
    h2 = _silu(a2)
    a_bn = h2 @ p["bottleneck.W"] + p["bottleneck.b"]
    _check(a_bn, "bottleneck layer")
    h = _silu(a_bn)
    u = h @ p["proj.W"] + p["proj.b"]
    _check(u, "projection head")
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateEmbeddingError("projection head output is the zero vector")
    z = u / norm
    a_dec = h @ p["dec.W"] + p["dec.b"]
    _check(a_dec, "decoder layer")
    d1 = _silu(a_dec)
    cat = np.concatenate([d1, h2], axis=1)
    eps_hat = cat @ p["out.W"] + p["out.b"]
    _check(eps_hat, "output layer")
    cache = dict(x=x, rows=rows, temb=temb, a1=a1, h1=h1, a2=a2, h2=h2, a_bn=a_bn,
                 h=h, z=z, norm=norm, a_dec=a_dec, cat=cat)
    return ForwardTrace(eps_hat=eps_hat, h_bottleneck=h, z=z, cache=cache)


def forward(model: DenoiserModel, x_t, t: int, y, schedule=None) -> ForwardTrace:
    """Single-sample forward pass. ``y`` is a class index or ``None`` for the null label."""
    label = NULL_LABEL if y is None else int(y)
    tr = forward_batch(model, np.asarray(x_t, dtype=np.float64)[None, :], [t], [label], schedule)
    return ForwardTrace(tr.eps_hat[0], tr.h_bottleneck[0], tr.z[0], tr.cache)


def backward(model: DenoiserModel, trace: ForwardTrace, d_eps_hat=None, d_z=None) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on ``eps_hat`` and/or ``z``."""
    p = model.params
    c = trace.cache
    h_w = model.arch.hidden
    g = {}
    if d_eps_hat is None:
        d_eps_hat = np.zeros_like(trace.eps_hat)
    g["out.W"] = c["cat"].T @ d_eps_hat
    g["out.b"] = d_eps_hat.sum(axis=0)
    d_cat = d_eps_hat @ p["out.W"].T
    d_a_dec = d_cat[:, :h_w] * _silu_grad(c["a_dec"])
    d_h2 = d_cat[:, h_w:]
    g["dec.W"] = c["h"].T @ d_a_dec
    g["dec.b"] = d_a_dec.sum(axis=0)
    d_h = d_a_dec @ p["dec.W"].T

    if d_z is None:
        g["proj.W"] = np.zeros_like(p["proj.W"])
        g["proj.b"] = np.zeros_like(p["proj.b"])
    else:
        z = c["z"]
        d_u = (d_z - z * np.sum(z * d_z, axis=1, keepdims=True)) / c["norm"]
        g["proj.W"] = c["h"].T @ d_u
        g["proj.b"] = d_u.sum(axis=0)
        d_h = d_h + d_u @ p["proj.W"].T

    d_a_bn = d_h * _silu_grad(c["a_bn"])
    g["bottleneck.W"] = c["h2"].T @ d_a_bn
    g["bottleneck.b"] = d_a_bn.sum(axis=0)
    d_h2 = d_h2 + d_a_bn @ p["bottleneck.W"].T
    d_a2 = d_h2 * _silu_grad(c["a2"])
    g["enc.W"] = c["h1"].T @ d_a2
    g["enc.b"] = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ p["enc.W"].T) * _silu_grad(c["a1"])
    g["in.W"] = c["x"].T @ d_a1
    g["in.b"] = d_a1.sum(axis=0)
    g["time.W"] = c["temb"].T @ d_a1
    g["time.b"] = d_a1.sum(axis=0)
    emb = np.zeros_like(p["class_embed"])
    np.add.at(emb, c["rows"], d_a1)
    g["class_embed"] = emb
    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"gradient of {name}")
    return {k: g[k] for k in p}


@dataclass
class Batch:
    """Denoiser inputs plus targets. ``y_in`` may hold NULL_LABEL; ``y`` holds original labels."""

    x_t: np.ndarray
    t: np.ndarray
    y_in: np.ndarray
    y: np.ndarray
    eps: np.ndarray


@dataclass(frozen=True)
class Objective:
    """Which loss to differentiate: ``"diffusion"``, ``"supcon"`` or ``"coral"``."""

    kind: str = "coral"
    tau_sc: float = 0.12
    lambda_bar: float = 1.0
    reduction: str = "mean"


@dataclass
class LossParts:
    diff: float
    con: float
    total: float
    no_positive_pairs: bool = False


def loss_and_grads(model: DenoiserModel, batch: Batch, objective: Objective):
    """Evaluate the chosen objective and its exact gradient for every parameter."""
    if objective.kind not in ("diffusion", "supcon", "coral"):
        raise ValueError(f"unknown objective {objective.kind!r}")
    tr = forward_batch(model, batch.x_t, batch.t, batch.y_in)
    diff = diffusion_loss(batch.eps, tr.eps_hat)
    d_eps = d_z = None
    con, flag = 0.0, False
    if objective.kind in ("diffusion", "coral"):
        d_eps = diffusion_loss_grad(batch.eps, tr.eps_hat)
    if objective.kind in ("supcon", "coral"):
        res = supcon_loss(tr.z, batch.y, objective.tau_sc, objective.reduction)
        con, flag = res.loss, res.no_positive_pairs
        weight = 1.0 if objective.kind == "supcon" else objective.lambda_bar
        d_z = weight * res.grad
    if objective.kind == "diffusion":
        total = diff
    elif objective.kind == "supcon":
        total = con
    else:
        total = diff + objective.lambda_bar * con
    grads = backward(model, tr, d_eps, d_z)
    return LossParts(diff, con, total, flag), grads


def objective_value(model: DenoiserModel, batch: Batch, objective: Objective) -> float:
    tr = forward_batch(model, batch.x_t, batch.t, batch.y_in)
    diff = diffusion_loss(batch.eps, tr.eps_hat)
    if objective.kind == "diffusion":
        return diff
    con = supcon_loss(tr.z, batch.y, objective.tau_sc, objective.reduction).loss
    if objective.kind == "supcon":
        return con
    return diff + objective.lambda_bar * con


@dataclass
class GradCheckReport:
    per_layer: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.per_layer.values())

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def grad_check(model: DenoiserModel, batch: Batch, objective: Objective,
               step: float = 1e-5, tolerance: float = 1e-4, scale_floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central finite differences over every parameter.

    The error of a layer is max |analytic - numeric| divided by the layer's largest
    gradient magnitude (floored at ``scale_floor``).
    """
    _, analytic = loss_and_grads(model, batch, objective)
    probe = model.copy()
    per_layer = {}
    for name, arr in probe.params.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = objective_value(probe, batch, objective)
            flat[i] = orig - step
            minus = objective_value(probe, batch, objective)
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2.0 * step)
        a = analytic[name]
        scale = max(np.abs(a).max(), np.abs(numeric).max(), scale_floor)
        per_layer[name] = float(np.abs(a - numeric).max() / scale)
    return GradCheckReport(per_layer, tolerance)


def save_checkpoint(model: DenoiserModel, path, schedule_params: dict | None = None) -> None:
    """Version byte, u32 header length, JSON header (arch + schedule), little-endian f32 blob."""
    header = {"arch": asdict(model.arch), "schedule": schedule_params or {}}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(model.params[k].astype("<f4").tobytes() for k in model.arch.shapes())
    Path(path).write_bytes(struct.pack("<BI", CHECKPOINT_VERSION, len(head)) + head + blob)


def load_checkpoint(path) -> tuple[DenoiserModel, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 5:
        raise CheckpointError("checkpoint truncated")
    version, head_len = struct.unpack_from("<BI", raw, 0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[5 : 5 + head_len].decode("utf-8"))
        arch = ArchConfig(**header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    blob = raw[5 + head_len :]
    if len(blob) != 4 * arch.parameter_count():
        raise CheckpointError(
            f"parameter blob has {len(blob) // 4} values, architecture needs {arch.parameter_count()}"
        )
    values = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    params, offset = {}, 0
    for name, shape in arch.shapes().items():
        n = math.prod(shape)
        params[name] = values[offset : offset + n].reshape(shape).copy()
        offset += n
    return DenoiserModel(arch, params), header.get("schedule", {})
