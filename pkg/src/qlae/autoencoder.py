"""Dense autoencoder with optional latent quantization, trained by AdamW/Adam.

Encoder and decoder are leaky-ReLU MLPs (``768 -> 256 -> 256 -> n_z`` and the
mirror image). The decoder emits one Bernoulli logit per pixel channel.

Parameters are split into two optimizer groups: every weight matrix is
decayed (AdamW), while biases and codebook values receive plain Adam updates.
Switching quantization off turns the same loop into a vanilla autoencoder.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from ._kernels import adam_inplace
from .numerics import Node, RngStream
from .quantization import GLOBAL, PER_DIMENSION, CodebookArray, init_codebooks, latent_quantization, quantize
from .world import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.3
# He-style fan-in scaling corrected for the leaky slope.
INIT_GAIN = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))

_STREAM_INIT = 0
_STREAM_BATCHES = 1


class TrainingDiverged(FloatingPointError):
    """A training step produced a non-finite loss."""

    def __init__(self, step: int, diagnostics: dict):
        self.step = step
        self.diagnostics = diagnostics
        super().__init__(f"non-finite loss at step {step}: {diagnostics}")


@dataclass
class TrainConfig:
    lambda_reconstruct: float = 1.0
    lambda_quantize: float = 1e-2
    lambda_commit: float = 1e-2
    batch_size: int = 128
    max_updates: int = 20_000
    n_z: int | None = None  # None -> twice the number of sources
    n_v: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.1
    quantize: bool = True
    global_codebook: bool = False
    hidden: tuple[int, ...] = (256, 256)
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 500

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("lambda_reconstruct", "lambda_quantize", "lambda_commit", "weight_decay", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_updates < 0:
            raise ValueError("max_updates must be >= 0")
        if self.n_v < 2:
            raise ValueError("n_v must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        valid = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - valid)
        if unknown:
            raise KeyError(f"unknown config keys {unknown}; valid keys are {sorted(valid)}")
        return cls(**d)

    def resolved(self, n_sources: int) -> "TrainConfig":
        if self.n_z is not None:
            return copy.copy(self)
        out = copy.copy(self)
        out.n_z = 2 * n_sources
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Mlp:
    """Weights ``(in, out)`` and biases ``(out,)`` for each dense layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = LEAKY_SLOPE

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(sizes, rng: RngStream, dtype=np.float32, gain: float = INIT_GAIN) -> Mlp:
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal((fan_in, fan_out)) * (gain / math.sqrt(fan_in))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Mlp(weights, biases)


def mlp_forward(nodes: list[Node], x: Node, slope: float = LEAKY_SLOPE) -> Node:
    """Apply a dense stack given ``[W0, b0, W1, b1, ...]`` nodes; last layer is affine."""
    h = x
    n_layers = len(nodes) // 2
    for i in range(n_layers):
        h = nx.matmul(h, nodes[2 * i]) + nodes[2 * i + 1]
        if i < n_layers - 1:
            h = nx.leaky_relu(h, slope)
    return h


def _check_input(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=mlp.weights[0].dtype)
    if x.ndim == 1:
        x = x[None, :]
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != mlp.sizes[0]:
        raise ValueError(f"input has {x.shape[1]} features, network expects {mlp.sizes[0]}")
    return x


def encode(p: Mlp, x) -> np.ndarray:
    """Continuous latents ``z_c`` for images ``x`` (flattened per row)."""
    single = np.ndim(x) == 1
    x = _check_input(p, x)
    out = mlp_forward([nx.constant(a) for a in p.arrays()], nx.constant(x), p.slope).value
    return out[0] if single else out


def decode(p: Mlp, z) -> np.ndarray:
    """Per-pixel-channel logits; ``sigmoid(logits)`` is the reconstruction."""
    return encode(p, z)


def sigmoid(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    return nx._sigmoid_from(a, np.exp(-np.abs(a)))


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))


def bce_loss(logits, x) -> float:
    """Mean binary cross-entropy of targets ``x`` in [0, 1] under ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if logits.shape != x.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {x.shape}")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("targets must lie in [0, 1]")
    return float(np.mean(x * _softplus(-logits) + (1 - x) * _softplus(logits)))


def bce_node(logits: Node, x: np.ndarray) -> Node:
    # x*softplus(-l) + (1-x)*softplus(l) == softplus(l) - x*l
    return nx.bce_with_logits(logits, x)


def psnr(reconstruction, x) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` when exact."""
    mse = float(np.mean((np.asarray(reconstruction, np.float64) - np.asarray(x, np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)


def psnr_per_image(reconstruction: np.ndarray, x: np.ndarray) -> np.ndarray:
    diff = (np.asarray(reconstruction, np.float64) - np.asarray(x, np.float64)).reshape(len(x), -1)
    mse = np.mean(diff**2, axis=1)
    with np.errstate(divide="ignore"):
        return np.where(mse == 0, np.inf, -10 * np.log10(mse))


# --- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments for a fixed-order parameter list.

    ``decayed[i]`` marks members of the AdamW group; the rest get ``wd = 0``.
    """

    m: list[np.ndarray]
    v: list[np.ndarray]
    decayed: list[bool]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray], decayed: list[bool], **hyper) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], list(decayed), **hyper)


def adamw_update(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState) -> None:
    """One in-place AdamW step with decoupled decay on the decayed group only.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    lr, wd = state.learning_rate, state.weight_decay
    for p, g, m, v, dec in zip(params, grads, state.m, state.v, state.decayed):
        t = p.dtype.type
        decay = t(1 - lr * wd) if dec else t(1)
        adam_inplace(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
            m.reshape(-1),
            v.reshape(-1),
            t(b1),
            t(1 - b1),
            t(b2),
            t(1 - b2),
            t(1 / math.sqrt(c2)),
            t(state.eps),
            t(lr / c1),
            decay,
        )


# --- model state --------------------------------------------------------------


@dataclass
class ModelState:
    encoder: Mlp
    decoder: Mlp
    codebooks: CodebookArray
    optimizer: OptimizerState
    config: TrainConfig
    rng: RngStream
    step: int = 0
    meta: dict = field(default_factory=dict)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in checkpoint order: encoder, decoder, codebook."""
        return self.encoder.arrays() + self.decoder.arrays() + [self.codebooks.values]

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    @property
    def quantized(self) -> bool:
        return self.config.quantize


def _decay_mask(n_enc: int, n_dec: int) -> list[bool]:
    # weights at even positions in each MLP list; biases and the codebook are not decayed
    return [i % 2 == 0 for i in range(n_enc)] + [i % 2 == 0 for i in range(n_dec)] + [False]


def init_state(config: TrainConfig, image_dim: int, n_sources: int) -> ModelState:
    config = config.resolved(n_sources)
    dtype = np.dtype(config.dtype)
    rng = RngStream(config.seed, _STREAM_INIT)
    encoder = init_mlp([image_dim, *config.hidden, config.n_z], rng, dtype)
    decoder = init_mlp([config.n_z, *reversed(config.hidden), image_dim], rng, dtype)
    mode = GLOBAL if config.global_codebook else PER_DIMENSION
    codebooks = init_codebooks(config.n_z, config.n_v, mode, dtype)
    params = encoder.arrays() + decoder.arrays() + [codebooks.values]
    decayed = _decay_mask(len(encoder.arrays()), len(decoder.arrays()))
    opt = OptimizerState.zeros_like(
        params,
        decayed,
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    return ModelState(encoder, decoder, codebooks, opt, config, RngStream(config.seed, _STREAM_BATCHES))


@dataclass
class StepLosses:
    total: float
    bce: float
    quantize: float
    commit: float
    psnr: float

    def as_record(self, step: int) -> dict:
        return {
            "step": step,
            "loss_total": self.total,
            "loss_bce": self.bce,
            "loss_quantize": self.quantize,
            "loss_commit": self.commit,
            "psnr": self.psnr,
        }


def loss_graph(state: ModelState, x: np.ndarray):
    """Build the weighted batch loss; returns ``(root, param_nodes, pieces)``."""
    cfg = state.config
    dt = np.dtype(cfg.dtype)
    enc = [nx.param(a) for a in state.encoder.arrays()]
    dec = [nx.param(a) for a in state.decoder.arrays()]
    cb = nx.param(state.codebooks.values, name="codebook")
    x = np.asarray(x, dtype=dt).reshape(len(x), -1)

    z_c = mlp_forward(enc, nx.constant(x), state.encoder.slope)
    if not np.all(np.isfinite(z_c.value)):
        raise TrainingDiverged(state.step, {"nonfinite_latents": int((~np.isfinite(z_c.value)).sum())})
    if cfg.quantize:
        q = latent_quantization(z_c, cb, state.codebooks)
        z = q.z
        l_quant = nx.mean(q.loss_quantize)
        l_commit = nx.mean(q.loss_commit)
    else:
        z = z_c
        l_quant = l_commit = nx.constant(np.zeros((), dtype=dt))
    logits = mlp_forward(dec, z, state.decoder.slope)
    l_bce = bce_node(logits, x)
    root = (
        nx.mul(l_bce, cfg.lambda_reconstruct)
        + nx.mul(l_quant, cfg.lambda_quantize)
        + nx.mul(l_commit, cfg.lambda_commit)
    )
    pieces = {"bce": l_bce, "quantize": l_quant, "commit": l_commit, "logits": logits, "x": x}
    return root, enc + dec + [cb], pieces


def qlae_step(state: ModelState, batch: np.ndarray, measure: bool = True) -> StepLosses:
    """One optimizer update on ``batch`` images; mutates ``state`` in place.

    ``measure=False`` skips the batch PSNR (reported as nan).
    """
    root, nodes, pieces = loss_graph(state, batch)
    total = float(root.value)
    if not math.isfinite(total):
        raise TrainingDiverged(state.step, _diagnostics(state, pieces, total))
    grads = nx.forward_backward(root)
    # the codebook is unreachable from the loss when quantization is off
    grad_list = [grads[n] if n in grads else np.zeros_like(n.value) for n in nodes]
    adamw_update(state.parameters(), grad_list, state.optimizer)
    state.step += 1
    batch_psnr = psnr(sigmoid(pieces["logits"].value), pieces["x"]) if measure else math.nan
    return StepLosses(
        total,
        float(pieces["bce"].value),
        float(pieces["quantize"].value),
        float(pieces["commit"].value),
        batch_psnr,
    )


def _diagnostics(state: ModelState, pieces: dict, total: float) -> dict:
    return {
        "loss_total": total,
        "loss_bce": float(pieces["bce"].value),
        "loss_quantize": float(pieces["quantize"].value),
        "loss_commit": float(pieces["commit"].value),
        "param_max_abs": max(float(np.max(np.abs(p))) if p.size else 0.0 for p in state.parameters()),
        "nonfinite_params": sum(int(not np.all(np.isfinite(p))) for p in state.parameters()),
    }


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    state: ModelState | None = None,
    stop_at: int | None = None,
) -> ModelState:
    """Run updates until ``config.max_updates`` (or ``stop_at``) is reached.

    Pass ``state`` to resume from a checkpoint. When ``out_dir`` is given a
    JSONL metric log is appended to and the final checkpoint is written there.
    """
    if state is None:
        state = init_state(config, int(np.prod(dataset.image_shape)), dataset.space.n_sources)
    cfg = state.config
    end = cfg.max_updates if stop_at is None else min(stop_at, cfg.max_updates)
    images = dataset.flat_images().astype(cfg.dtype)

    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "metrics.jsonl", "a" if state.step else "w")
    try:
        while state.step < end:
            idx = state.rng.choice(len(images), cfg.batch_size)
            due = (state.step + 1) % cfg.log_every == 0 or state.step + 1 == end
            losses = qlae_step(state, images[idx], measure=due)
            if log_file is not None and due:
                log_file.write(json.dumps(losses.as_record(state.step)) + "\n")
            if due:
                log.info("step %d bce %.4f psnr %.2f", state.step, losses.bce, losses.psnr)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "checkpoint")
    return state


# --- inference helpers ----------------------------------------------------------


@dataclass
class Embedding:
    z_c: np.ndarray  # continuous encoder output
    z: np.ndarray  # code fed to the decoder
    indices: np.ndarray | None  # code positions when quantized


def embed(state: ModelState, images: np.ndarray, chunk: int = 2048) -> Embedding:
    flat = np.asarray(images).reshape(len(images), -1)
    z_c = np.concatenate([encode(state.encoder, flat[i : i + chunk]) for i in range(0, len(flat), chunk)])
    if state.quantized:
        z, idx = quantize(z_c, state.codebooks)
        return Embedding(z_c, z, idx)
    return Embedding(z_c, z_c, None)


def reconstruct(state: ModelState, images: np.ndarray) -> np.ndarray:
    e = embed(state, images)
    return sigmoid(decode(state.decoder, e.z)).reshape(np.shape(images))


def latent_traversal(
    state: ModelState,
    x: np.ndarray,
    dim: int,
    n_steps: int,
    eval_images: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Decode ``n_steps`` codes sweeping latent ``dim`` from its minimum to maximum.

    The range is taken from the continuous encoder outputs of ``eval_images``
    (defaults to ``x`` alone). Swept codes are re-quantized when quantization
    is on; all other coordinates stay at ``x``'s code.
    """
    n_z = state.config.n_z
    if not 0 <= dim < n_z:
        raise ValueError(f"dim {dim} out of range for {n_z} latents")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    from .infomec import prune_inactive

    x = np.asarray(x)
    ref = embed(state, x[None] if eval_images is None else eval_images)
    lo, hi = float(ref.z_c[:, dim].min()), float(ref.z_c[:, dim].max())
    base = embed(state, x[None])
    grid = np.linspace(lo, hi, n_steps) if n_steps > 1 else np.array([lo])

    z_c = np.repeat(base.z_c, n_steps, axis=0)
    z_c[:, dim] = grid
    if state.quantized:
        z, _ = quantize(z_c, state.codebooks)
        z = np.where(np.arange(n_z) == dim, z, base.z)
    else:
        z = z_c
    frames = sigmoid(decode(state.decoder, z.astype(state.config.dtype))).reshape((n_steps,) + x.shape)
    latents = ref.indices if state.quantized else ref.z_c
    active = prune_inactive(latents) if len(latents) > 1 else np.ones(n_z, bool)
    meta = {"dim": dim, "min": lo, "max": hi, "steps": n_steps, "inactive": not bool(active[dim])}
    return frames, meta


# --- checkpoints ----------------------------------------------------------------
#
# checkpoint/meta.json   config echo, config_hash, step, rng, optimizer scalars,
#                        dtype and the ordered list of tensor names and shapes
# checkpoint/params.bin  the listed tensors back to back, row-major, little-endian
#                        float32 (or float64 when the run used float64)
#
# Tensor order: encoder W0 b0 W1 b1 ..., decoder W0 b0 ..., codebook, then the
# first moments in the same order, then the second moments.


def _tensor_table(state: ModelState) -> list[tuple[str, np.ndarray]]:
    names = []
    for prefix, mlp in (("encoder", state.encoder), ("decoder", state.decoder)):
        for i in range(len(mlp.weights)):
            names += [f"{prefix}.W{i}", f"{prefix}.b{i}"]
    names.append("codebook")
    params = state.parameters()
    table = list(zip(names, params))
    table += [(f"adam_m.{n}", m) for n, m in zip(names, state.optimizer.m)]
    table += [(f"adam_v.{n}", v) for n, v in zip(names, state.optimizer.v)]
    return table


def save_checkpoint(state: ModelState, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = _tensor_table(state)
    dt = np.dtype(state.config.dtype).newbyteorder("<")
    opt = state.optimizer
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "step": state.step,
        "rng": state.rng.to_dict(),
        "optimizer": {"step": opt.step, "decayed": opt.decayed},
        "codebook_mode": state.codebooks.mode,
        "dtype": dt.str,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in table],
        **({"extra": state.meta} if state.meta else {}),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    with open(directory / "params.bin", "wb") as fh:
        for _, a in table:
            fh.write(np.ascontiguousarray(a, dtype=dt).tobytes())
    return directory


def load_checkpoint(directory) -> ModelState:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    config = TrainConfig.from_dict(meta["config"])
    dt = np.dtype(meta["dtype"])
    blob = np.fromfile(directory / "params.bin", dtype=dt)
    expected = sum(math.prod(t["shape"]) for t in meta["tensors"])
    if blob.size != expected:
        raise ValueError(f"params.bin holds {blob.size} values, meta.json implies {expected}")
    arrays, pos = [], 0
    for t in meta["tensors"]:
        n = math.prod(t["shape"])
        arrays.append(blob[pos : pos + n].reshape(t["shape"]).astype(config.dtype))
        pos += n

    n_params = len(arrays) // 3
    params, m, v = arrays[:n_params], arrays[n_params : 2 * n_params], arrays[2 * n_params :]
    n_layers = len(config.hidden) + 1
    enc_arrays, dec_arrays = params[: 2 * n_layers], params[2 * n_layers : 4 * n_layers]
    encoder = Mlp(enc_arrays[0::2], enc_arrays[1::2])
    decoder = Mlp(dec_arrays[0::2], dec_arrays[1::2])
    codebooks = CodebookArray(params[-1], config.n_z, meta["codebook_mode"])
    opt = OptimizerState(
        m,
        v,
        meta["optimizer"]["decayed"],
        step=meta["optimizer"]["step"],
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    rng = RngStream(**meta["rng"])
    return ModelState(encoder, decoder, codebooks, opt, config, rng, meta["step"], meta.get("extra", {}))
