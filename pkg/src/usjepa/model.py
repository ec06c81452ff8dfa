"""Vision-transformer encoder, masked predictor, adapter and the teacher.

The student and teacher are ``Encoder`` instances; the predictor takes the
student's context tokens plus one mask token per target patch and regresses
the teacher's embeddings of those patches through a linear adapter.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import tensor as T
from .numerics.checkpoint import arrays_sha256, load_checkpoint
from .numerics.tensor import Parameter, Tensor

log = logging.getLogger(__name__)

MASK_BIAS = -1e9


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    img_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    pos_embed: str = "sincos"
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.pixel_std <= 0:
            raise ValueError("pixel_std must be positive")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.img_size % self.patch_size:
            raise ValueError("patch_size must divide img_size")
        if self.pos_embed != "sincos":
            raise ValueError(f"unknown positional embedding {self.pos_embed!r}")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size


@dataclass
class PredictorConfig:
    embed_dim: int = 384
    depth: int = 12
    heads: int = 12
    target_dim: int = 768
    mlp_ratio: float = 4.0
    identity_adapter: bool = False

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("predictor embed_dim must be divisible by heads")


@dataclass
class TeacherMode:
    kind: str = "static"  # "static" or "ema"
    source: str = "random"  # random | snapshot:PATH | checkpoint:PATH
    momentum: tuple[float, float] = (0.996, 1.0)

    def __post_init__(self):
        if self.kind not in ("static", "ema"):
            raise ValueError(f"teacher kind must be static or ema, got {self.kind!r}")
        kind, sep, path = self.source.partition(":")
        if not (self.source == "random" or (kind in ("snapshot", "checkpoint") and sep and path)):
            raise ValueError(f"teacher source must be random, snapshot:PATH or checkpoint:PATH, got {self.source!r}")
        lo, hi = self.momentum
        if not 0 <= lo <= hi <= 1:
            raise ValueError("EMA momentum bounds must satisfy 0 <= lo <= hi <= 1")


DESK_ENCODER = EncoderConfig(img_size=64, patch_size=8, embed_dim=64, depth=4, heads=4)
DESK_PREDICTOR = PredictorConfig(embed_dim=32, depth=4, heads=4, target_dim=64)
FULL_ENCODER = EncoderConfig()
FULL_PREDICTOR = PredictorConfig()


# ---------------------------------------------------------------------------
# positional embedding
# ---------------------------------------------------------------------------


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, rows: int, cols: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table, one row per patch in raster order."""
    if dim % 4:
        raise ValueError("sincos embedding needs dim divisible by 4")
    r, c = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, r), _sincos_1d(dim // 2, c)], axis=1)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


class Module:
    def named_parameters(self, prefix: str = ""):
        for k, v in vars(self).items():
            if isinstance(v, Parameter):
                yield prefix + k, v
            elif isinstance(v, Module):
                yield from v.named_parameters(f"{prefix}{k}.")
            elif isinstance(v, list):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{k}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for n, p in own.items():
            if n in state:
                if state[n].shape != p.data.shape:
                    raise ValueError(f"{n}: shape {state[n].shape} != {p.data.shape}")
                p.data = np.array(state[n], dtype=p.data.dtype)

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for m in self._buffers():
            setattr(self, m, getattr(self, m).astype(dtype))
        for v in vars(self).values():
            if isinstance(v, Module) and v is not self:
                v.astype(dtype)
            elif isinstance(v, list):
                for m in v:
                    if isinstance(m, Module):
                        m.astype(dtype)
        return self

    def _buffers(self) -> list[str]:
        return []

    def weights_hash(self) -> str:
        return arrays_sha256(self.state_dict())

    @property
    def dtype(self):
        return self.parameters()[0].data.dtype


def _xavier_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, identity: bool = False,
                 init: str = "trunc_normal"):
        if identity:
            w = np.eye(d_in, d_out)
        elif init == "xavier":
            w = _xavier_uniform(rng, (d_in, d_out))
        else:
            w = _trunc_normal(rng, (d_in, d_out))
        self.weight = Parameter(w.astype(np.float32))
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim, dtype=np.float32), decay=False)
        self.beta = Parameter(np.zeros(dim, dtype=np.float32), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, bias: np.ndarray | None) -> Tensor:
        b, k, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, k, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, kk, v = qkv[0], qkv[1], qkv[2]
        att = T.matmul(q, T.swapaxes(kk, -1, -2)) * float((d // h) ** -0.5)
        if bias is not None:
            att = att + bias
        att = T.softmax(att, axis=-1)
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, k, d)
        return self.proj(out)


class Block(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng):
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, bias) -> Tensor:
        x = x + self.attn(self.norm1(x), bias)
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


def key_bias(valid: np.ndarray | None, dtype) -> np.ndarray | None:
    """Additive attention bias hiding padded keys; ``valid`` is (B, K) bool."""
    if valid is None or valid.all():
        return None
    return np.where(valid, 0.0, MASK_BIAS).astype(dtype)[:, None, None, :]


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W) -> (B, N, patch*patch), raster patch order."""
    b, h, w = frames.shape
    x = frames.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        # patch projection is initialised like a dense layer so pixel content
        # is not swamped by the positional code at initialisation
        self.patch_embed = Linear(cfg.patch_size**2, cfg.embed_dim, rng, init="xavier")
        self.blocks = [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim)
        self.pos = sincos_2d(cfg.embed_dim, cfg.grid, cfg.grid).astype(np.float32)

    def _buffers(self):
        return ["pos"]

    @property
    def n_patches(self) -> int:
        return self.cfg.grid**2

    def __call__(self, frames: np.ndarray, idx: np.ndarray | None = None, valid: np.ndarray | None = None) -> Tensor:
        """Embed the patches listed in ``idx`` (B, K); all patches if ``idx`` is None."""
        frames = np.asarray(frames, dtype=self.dtype)
        if frames.ndim == 2:
            frames = frames[None]
        patches = (patchify(frames, self.cfg.patch_size) - self.cfg.pixel_mean) / self.cfg.pixel_std
        b = patches.shape[0]
        if idx is None:
            idx = np.broadcast_to(np.arange(self.n_patches), (b, self.n_patches))
        if idx.shape[1] == 0:
            raise ValueError("encoder called with an empty patch set")
        rows = np.arange(b)[:, None]
        x = self.patch_embed(Tensor(patches[rows, idx])) + self.pos[idx]
        bias = key_bias(valid, self.dtype)
        for blk in self.blocks:
            x = blk(x, bias)
        return self.norm(x)


class Predictor(Module):
    def __init__(self, cfg: PredictorConfig, enc_dim: int, grid: int, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(enc_dim, cfg.embed_dim, rng)
        self.mask_token = Parameter(np.zeros((1, 1, cfg.embed_dim), dtype=np.float32), decay=False)
        self.mask_token.data[:] = _trunc_normal(rng, (1, 1, cfg.embed_dim))
        self.blocks = [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim)
        self.pos = sincos_2d(cfg.embed_dim, grid, grid).astype(np.float32)

    def _buffers(self):
        return ["pos"]

    def __call__(self, ctx: Tensor, ctx_idx: np.ndarray, ctx_valid: np.ndarray | None, tgt_idx: np.ndarray,
                 tgt_valid: np.ndarray | None = None) -> Tensor:
        """Predict one row per target position.

        ``ctx`` is (B, Kc, enc_dim); ``tgt_idx`` is (B, Kt). Returns (B, Kt, embed_dim).
        """
        if tgt_idx.shape[1] == 0:
            raise ValueError("predictor called with no target positions")
        b, kc = ctx_idx.shape
        kt = tgt_idx.shape[1]
        x = self.embed(ctx) + self.pos[ctx_idx]
        m = self.mask_token + self.pos[tgt_idx]
        z = T.concat([x, m], axis=1)
        cv = np.ones((b, kc), bool) if ctx_valid is None else ctx_valid
        tv = np.ones((b, kt), bool) if tgt_valid is None else tgt_valid
        bias = key_bias(np.concatenate([cv, tv], axis=1), self.dtype)
        for blk in self.blocks:
            z = blk(z, bias)
        z = self.norm(z)
        return z[:, kc:]


class ModelStack(Module):
    """Student encoder, predictor, adapter and teacher."""

    def __init__(self, encoder: EncoderConfig, predictor: PredictorConfig, teacher_mode: TeacherMode | None = None,
                 seed: int = 0, teacher_encoder: EncoderConfig | None = None):
        self.teacher_mode = teacher_mode or TeacherMode()
        self.seed = seed
        rng = np.random.default_rng([seed, 0])
        self.student = Encoder(encoder, rng)
        self.predictor = Predictor(predictor, encoder.embed_dim, encoder.grid, rng)
        self.adapter = Linear(predictor.embed_dim, predictor.target_dim, rng, identity=predictor.identity_adapter)
        tcfg = teacher_encoder or encoder
        if tcfg.embed_dim != predictor.target_dim:
            raise ValueError(f"adapter output {predictor.target_dim} != teacher dim {tcfg.embed_dim}")
        if tcfg.grid != encoder.grid:
            raise ValueError("teacher and student must share the patch grid")
        if self.teacher_mode.kind == "ema":
            if tcfg != encoder:
                raise ValueError("EMA teacher must share the student architecture")
            self.teacher = copy.deepcopy(self.student)
        else:
            self.teacher = Encoder(tcfg, np.random.default_rng([seed, 1]))
            self._load_teacher_source(self.teacher_mode.source)
        self.teacher.freeze()

    def _load_teacher_source(self, source: str) -> None:
        if source in ("", "random"):
            return
        kind, _, path = source.partition(":")
        if kind not in ("snapshot", "checkpoint") or not path:
            raise ValueError(f"bad teacher source {source!r}")
        arrays, _ = load_checkpoint(path)
        for prefix in ("student.", "teacher.", ""):
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            if prefix == "" or sub:
                break
        own = {n for n, _ in self.teacher.named_parameters()}
        self.teacher.load_state_dict({k: v for k, v in sub.items() if k in own})

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def teacher_hash(self) -> str:
        return self.teacher.weights_hash()


# ---------------------------------------------------------------------------
# functional entry points
# ---------------------------------------------------------------------------


def encode_context(stack: ModelStack, frames, ctx_idx: np.ndarray, ctx_valid: np.ndarray | None = None) -> Tensor:
    return stack.student(frames, ctx_idx, ctx_valid)


def encode_target(stack: ModelStack, frames) -> np.ndarray:
    """All-patch teacher embeddings ``s_y``, shape (B, N, target_dim); never recorded."""
    with T.no_grad():
        return stack.teacher(frames).data


def select(s_y: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Gather ``s_y[b, idx[b]]`` for every batch row."""
    s_y = np.asarray(s_y)
    if s_y.ndim == 2:
        return s_y[np.asarray(idx)]
    return s_y[np.arange(s_y.shape[0])[:, None], idx]


def predict(stack: ModelStack, c: Tensor, ctx_idx, ctx_valid, tgt_idx, tgt_valid=None) -> Tensor:
    return stack.predictor(c, ctx_idx, ctx_valid, tgt_idx, tgt_valid)


def adapt(stack: ModelStack, z: Tensor) -> Tensor:
    if z.shape[-1] != stack.adapter.weight.shape[0]:
        raise ValueError(f"adapter expects dim {stack.adapter.weight.shape[0]}, got {z.shape[-1]}")
    return stack.adapter(z)


def ema_update(teacher: Module, student: Module, momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise, in place."""
    tp = dict(teacher.named_parameters())
    sp = dict(student.named_parameters())
    if set(tp) != set(sp):
        raise ValueError("teacher and student parameter sets differ")
    for n, t in tp.items():
        s = sp[n]
        if t.data.shape != s.data.shape:
            raise ValueError(f"{n}: shape mismatch {t.data.shape} vs {s.data.shape}")
        t.data = (momentum * t.data + (1.0 - momentum) * s.data).astype(t.data.dtype)


def pooled_features(encoder: Encoder, frames: np.ndarray, batch: int = 64) -> np.ndarray:
    """Mean over all patch tokens of the encoder output, one row per frame."""
    out = []
    with T.no_grad():
        for i in range(0, len(frames), batch):
            out.append(encoder(frames[i : i + batch]).data.mean(axis=1))
    return np.concatenate(out, axis=0).astype(np.float64)


def model_card(stack: ModelStack, seed: int, extra: dict | None = None) -> str:
    lines = [
        "US-JEPA model card",
        f"seed: {seed}",
        f"student: {asdict(stack.student.cfg)}",
        f"predictor: {asdict(stack.predictor.cfg)}",
        f"teacher: {asdict(stack.teacher.cfg)}",
        f"teacher_mode: {stack.teacher_mode.kind}",
        f"teacher_source: {stack.teacher_mode.source}",
        f"teacher_sha256: {stack.teacher_hash()}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"
