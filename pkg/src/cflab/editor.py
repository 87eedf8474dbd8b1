"""Toy conditional flow editor: patch tokens, adapters, three training phases.

The pixel/latent bridge is a fixed linear patchify: each 4x4x3 patch is
projected onto an orthonormal luminance/chroma DCT basis truncated to the
token width, so decode(encode(x)) is an orthogonal projection and smooth
synthetic backgrounds survive the round trip essentially unchanged.

The velocity net is a per-token MLP over assembled context features
(the noisy token, a 3x3 neighborhood of masked-image tokens, pooled scene
context, reference-object tokens, position, and time) plus a trainable
task vector. Low-rank adapter pairs graft task-specific behavior onto the
frozen backbone: one pair for insertion, one for removal.

Training phases: inpainting pretext (backbone + both adapters), paired
warmups (one adapter + its task vector each), and unpaired post-training
where a remove-then-reinsert cycle supervises the insertion adapter while
the removal adapter is held constant.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flowmatch, maskops, scenes
from .errors import ConfigError, IntegrityError, ShapeError
from .numerics import (
    Mlp,
    Tape,
    adam_init,
    adam_step,
    backward,
    mlp_init,
    read_checkpoint,
    write_checkpoint,
)

PATCH = 4
TOKEN_DIM = 32
HIDDEN = (160, 160)
LORA_RANK = 4
LORA_ALPHA = 8.0
TAU_SIGMA = 0.02
COMPOSITE_MARGIN = 6  # px at 64x64; sampling blends the input back outside
# dilate(mask, margin), leaving room for effect synthesis/removal

_NEIGH = 2  # token-neighborhood radius in the condition assembly
_TOKEN_SCALE = 0.35  # fixed gain on token-valued net inputs; keeps the
# low-frequency channels inside the nonlinearity's responsive range
_N_POS_FEATS = 7
_N_TIME_FEATS = 3


# ---------------------------------------------------------------------------
# Patch encoder
# ---------------------------------------------------------------------------


def _dct_basis(p):
    """Orthonormal 2D DCT-II functions on a p x p patch, low frequency first."""
    y = np.arange(p)
    funcs = []
    order = []
    for u in range(p):
        for v in range(p):
            au = np.sqrt(1.0 / p) if u == 0 else np.sqrt(2.0 / p)
            av = np.sqrt(1.0 / p) if v == 0 else np.sqrt(2.0 / p)
            fy = au * np.cos((2 * y + 1) * u * np.pi / (2 * p))
            fx = av * np.cos((2 * y + 1) * v * np.pi / (2 * p))
            funcs.append(np.outer(fy, fx))
            order.append((u + v, max(u, v), u, v))
    idx = sorted(range(len(funcs)), key=lambda i: order[i])
    return [funcs[i] for i in idx]


class PatchEncoder:
    """Fixed linear patchify with an orthonormal truncated basis.

    Tokens keep the full spatial spectrum of the luminance channel and the
    low-frequency spectrum of the two chroma channels. Decode is the
    transpose projection, so encode(decode(z)) == z exactly and
    decode(encode(x)) is the orthogonal projection onto the kept subspace.
    """

    def __init__(self, patch=PATCH, token_dim=TOKEN_DIM):
        if token_dim > 3 * patch * patch:
            raise ConfigError(f"token width {token_dim} exceeds patch capacity")
        self.patch = patch
        self.token_dim = token_dim
        luma = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
        cb = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
        cr = np.array([1.0, -2.0, 1.0]) / np.sqrt(6.0)
        spatial = _dct_basis(patch)
        n_sp = len(spatial)
        n_luma = min(n_sp, token_dim)
        n_chroma = (token_dim - n_luma) // 2
        rows = []
        for k in range(n_luma):
            rows.append(np.einsum("yx,c->yxc", spatial[k], luma).ravel())
        for color in (cb, cr):
            for k in range(n_chroma):
                rows.append(np.einsum("yx,c->yxc", spatial[k], color).ravel())
        while len(rows) < token_dim:  # odd chroma remainder goes to cb
            rows.append(np.einsum("yx,c->yxc", spatial[n_chroma], cb).ravel())
        self.basis = np.stack(rows[:token_dim])  # (d, 3p^2), orthonormal rows

    def grid_shape(self, image_shape):
        h, w = image_shape[:2]
        if h % self.patch or w % self.patch:
            raise ShapeError(f"image {h}x{w} not divisible by patch {self.patch}")
        return h // self.patch, w // self.patch

    def _patches(self, image):
        h, w = image.shape[:2]
        gy, gx = self.grid_shape(image.shape)
        p = self.patch
        return (
            image.reshape(gy, p, gx, p, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gy * gx, p * p * 3)
        )

    def encode(self, image) -> np.ndarray:
        """Image (H, W, 3) -> tokens ((H/p)*(W/p), d); linear, no bias."""
        image = np.asarray(image, dtype=np.float64)
        return self._patches(image) @ self.basis.T

    def decode(self, tokens, image_shape) -> np.ndarray:
        """Tokens -> image of the given (H, W) via the transpose projection."""
        h, w = image_shape[:2]
        gy, gx = h // self.patch, w // self.patch
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.shape != (gy * gx, self.token_dim):
            raise ShapeError(f"expected {(gy * gx, self.token_dim)} tokens, got {tokens.shape}")
        p = self.patch
        patches = tokens @ self.basis
        return (
            patches.reshape(gy, gx, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, 3)
        )

    def encode_batch(self, images) -> np.ndarray:
        return np.stack([self.encode(img) for img in images])


def encode_condition(encoder: PatchEncoder, masked_image) -> np.ndarray:
    """Tokens of the masked scene image."""
    return encoder.encode(masked_image)


def encode_object(encoder: PatchEncoder, reference_image) -> np.ndarray:
    """Tokens of the reference-object image."""
    return encoder.encode(reference_image)


@dataclass
class ConditionTokens:
    """Masked-image tokens plus optional reference-object tokens.

    ``tokens()`` concatenates along the token axis with the masked-image
    block first, which is the order the velocity net assumes.
    """

    x: np.ndarray  # (..., T, d)
    o: np.ndarray | None = None

    def tokens(self) -> np.ndarray:
        if self.o is None:
            return self.x
        return np.concatenate([self.x, self.o], axis=-2)


def concat_condition(x_tokens, o_tokens=None) -> ConditionTokens:
    return ConditionTokens(x=np.asarray(x_tokens), o=None if o_tokens is None else np.asarray(o_tokens))


# ---------------------------------------------------------------------------
# Adapter state
# ---------------------------------------------------------------------------


@dataclass
class AdapterState:
    """Frozen-ish backbone plus the two adapter sets and task vectors."""

    encoder: PatchEncoder
    backbone: Mlp
    lora_theta: dict  # insertion adapter: {a0, b0, a1, b1, ...}
    lora_phi: dict  # removal adapter
    tau_removal: np.ndarray
    tau_insertion: np.ndarray
    rank: int = LORA_RANK
    alpha: float = LORA_ALPHA

    def lora(self, name) -> dict:
        if name == "theta":
            return self.lora_theta
        if name == "phi":
            return self.lora_phi
        raise ConfigError(f"unknown adapter {name!r}")

    def tau(self, name) -> np.ndarray:
        if name == "removal":
            return self.tau_removal
        if name == "insertion":
            return self.tau_insertion
        raise ConfigError(f"unknown task vector {name!r}")


def feature_width(token_dim=TOKEN_DIM) -> int:
    """Constant per-token feature width, before the task vector block."""
    window = (2 * _NEIGH + 1) ** 2
    return token_dim * (1 + window + 1 + 4 + 1) + _N_POS_FEATS + _N_TIME_FEATS


def build_adapter_state(
    patch=PATCH,
    token_dim=TOKEN_DIM,
    hidden=HIDDEN,
    rank=LORA_RANK,
    alpha=LORA_ALPHA,
    nonlin="gelu",
    seed=0,
) -> AdapterState:
    """Fresh state: He-uniform backbone, zero-B adapters, small task vectors."""
    encoder = PatchEncoder(patch, token_dim)
    widths = [feature_width(token_dim) + token_dim, *hidden, token_dim]
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    kb, kth, kph, ktau = ss.spawn(4)
    backbone = mlp_init(widths, nonlin=nonlin, seed=kb)

    def _lora(seed_seq):
        rng = np.random.default_rng(seed_seq)
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / fan_in)
            params[f"b{i}"] = np.zeros((fan_in, rank))
            params[f"a{i}"] = rng.uniform(-limit, limit, size=(rank, fan_out))
        return params

    rng_tau = np.random.default_rng(ktau)
    return AdapterState(
        encoder=encoder,
        backbone=backbone,
        lora_theta=_lora(kth),
        lora_phi=_lora(kph),
        tau_removal=rng_tau.normal(0.0, TAU_SIGMA, size=token_dim),
        tau_insertion=rng_tau.normal(0.0, TAU_SIGMA, size=token_dim),
        rank=rank,
        alpha=alpha,
    )


def backbone_checksum(state: AdapterState) -> str:
    h = hashlib.sha256()
    for i in range(len(state.backbone.weights)):
        h.update(state.backbone.weights[i].tobytes())
        h.update(state.backbone.biases[i].tobytes())
    return h.hexdigest()


def adapter_checksum(state: AdapterState, name) -> str:
    h = hashlib.sha256()
    params = state.lora(name)
    for k in sorted(params):
        h.update(params[k].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Feature assembly
# ---------------------------------------------------------------------------


def _position_features(grid_shape) -> np.ndarray:
    gy, gx = grid_shape
    py, px = np.mgrid[0:gy, 0:gx]
    ny = 2.0 * py / max(gy - 1, 1) - 1.0
    nx = 2.0 * px / max(gx - 1, 1) - 1.0
    par2 = ((py // 2 + px // 2) % 2) * 2.0 - 1.0
    par4 = ((py // 4 + px // 4) % 2) * 2.0 - 1.0
    feats = np.stack([nx, ny, nx * ny, nx * nx, ny * ny, par2, par4], axis=-1)
    return feats.reshape(gy * gx, _N_POS_FEATS)


def _neighborhood(tokens_grid, r=_NEIGH) -> np.ndarray:
    """(B, gy, gx, d) -> (B, gy*gx, (2r+1)^2 * d); zero padded at the edges."""
    b, gy, gx, d = tokens_grid.shape
    padded = np.zeros((b, gy + 2 * r, gx + 2 * r, d))
    padded[:, r : r + gy, r : r + gx] = tokens_grid
    offsets = range(-r, r + 1)
    shifts = [
        padded[:, r + dy : r + dy + gy, r + dx : r + dx + gx]
        for dy in offsets
        for dx in offsets
    ]
    return np.concatenate(shifts, axis=-1).reshape(b, gy * gx, len(shifts) * d)


def _quadrant_means(tokens_grid) -> np.ndarray:
    """(B, gy, gx, d) -> (B, 4d): mean token per grid quadrant."""
    b, gy, gx, d = tokens_grid.shape
    hy, hx = max(gy // 2, 1), max(gx // 2, 1)
    quads = [
        tokens_grid[:, :hy, :hx],
        tokens_grid[:, :hy, hx:],
        tokens_grid[:, hy:, :hx],
        tokens_grid[:, hy:, hx:],
    ]
    return np.concatenate([q.reshape(b, -1, d).mean(axis=1) for q in quads], axis=-1)


def assemble_features(z_t, cond: ConditionTokens, t, grid_shape) -> np.ndarray:
    """Constant per-token net inputs (everything except the task vector).

    z_t: (B, T, d) noisy tokens; cond.x: (B, T, d); cond.o: (B, T, d) or
    None (zeros for removal); t: scalar or (B,). Returns (B*T, width).
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim == 2:
        z_t = z_t[None]
    b, n_tok, d = z_t.shape
    gy, gx = grid_shape
    if gy * gx != n_tok:
        raise ShapeError(f"grid {grid_shape} vs {n_tok} tokens")
    cx = np.asarray(cond.x, dtype=np.float64).reshape(b, n_tok, d)
    co = (
        np.zeros_like(cx)
        if cond.o is None
        else np.asarray(cond.o, dtype=np.float64).reshape(b, n_tok, d)
    )
    cx_grid = cx.reshape(b, gy, gx, d)
    neigh = _neighborhood(cx_grid)
    quad = np.broadcast_to(_quadrant_means(cx_grid)[:, None, :], (b, n_tok, 4 * d))
    mean_o = np.broadcast_to(co.mean(axis=1)[:, None, :], (b, n_tok, d))
    pos = np.broadcast_to(_position_features(grid_shape)[None], (b, n_tok, _N_POS_FEATS))
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1, 1), (b, n_tok, 1))
    t_feats = np.concatenate([t_arr, t_arr**2, 1.0 - t_arr], axis=-1)
    tokens = _TOKEN_SCALE * np.concatenate([z_t, neigh, co, quad, mean_o], axis=-1)
    feats = np.concatenate([tokens, pos, t_feats], axis=-1)
    return np.ascontiguousarray(feats.reshape(b * n_tok, -1))


# ---------------------------------------------------------------------------
# Velocity net forward (plain and taped)
# ---------------------------------------------------------------------------

_TASK_PAIRS = {("removal", "phi"), ("insertion", "theta")}


def _effective_weights(state: AdapterState, adapters):
    scale = state.alpha / state.rank
    ws = []
    for i, w in enumerate(state.backbone.weights):
        w_eff = w
        for name in adapters:
            lora = state.lora(name)
            w_eff = w_eff + scale * (lora[f"b{i}"] @ lora[f"a{i}"])
        ws.append(w_eff)
    return ws


def _net_forward_np(state: AdapterState, feats, tau, adapters, z_t_flat):
    """MLP over assembled features with the analytic -z_t velocity head.

    The head makes u = f(features) - z_t, so the network regresses the
    endpoint-like part instead of having to learn the exact noise
    cancellation; at t=0 this reduces to predicting the conditional mean.
    """
    n = feats.shape[0]
    x = np.hstack([feats, np.tile(tau, (n, 1))])
    ws = _effective_weights(state, adapters)
    last = len(ws) - 1
    for i, w in enumerate(ws):
        x = x @ w + state.backbone.biases[i]
        if i < last:
            x = np.tanh(x) if state.backbone.nonlin == "tanh" else _gelu_np(x)
    return x - z_t_flat


def _gelu_np(x):
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _ref(tape: Tape, refs: dict, name: str, value, trainable: set):
    """Leaf for trainable params (shared across branches), const otherwise."""
    if name not in refs:
        refs[name] = tape.leaf(value, name=name) if name in trainable else tape.const(value)
    return refs[name]


def _net_forward_tape(tape, refs, state, feats, tau_name, adapters, trainable, z_t_flat):
    n = feats.shape[0]
    feats_ref = tape.const(feats)
    if tau_name is None:
        tau_ref = tape.const(np.zeros(state.encoder.token_dim))
    else:
        tau_ref = _ref(tape, refs, f"tau.{tau_name}", state.tau(tau_name), trainable)
    x = tape.concat_cols(feats_ref, tape.broadcast_rows(tau_ref, n))
    scale = state.alpha / state.rank
    last = len(state.backbone.weights) - 1
    for i in range(len(state.backbone.weights)):
        w_ref = _ref(tape, refs, f"backbone.w{i}", state.backbone.weights[i], trainable)
        b_ref = _ref(tape, refs, f"backbone.b{i}", state.backbone.biases[i], trainable)
        w_eff = w_ref
        for name in adapters:
            lora = state.lora(name)
            bb = _ref(tape, refs, f"{name}.b{i}", lora[f"b{i}"], trainable)
            aa = _ref(tape, refs, f"{name}.a{i}", lora[f"a{i}"], trainable)
            w_eff = tape.add(w_eff, tape.scale(tape.matmul(bb, aa), scale))
        x = tape.affine(x, w_eff, b_ref)
        if i < last:
            x = tape.tanh(x) if state.backbone.nonlin == "tanh" else tape.gelu(x)
    return tape.sub(x, tape.const(z_t_flat))


def velocity_net(state: AdapterState, z_t, cond: ConditionTokens, t, tau, adapter):
    """Predicted velocity with the shape of z_t.

    ``tau`` in {"removal", "insertion"} and ``adapter`` in {"phi", "theta"}
    must form a matching task pair, mirroring how inference switches tasks
    by embedding selection.
    """
    if (tau, adapter) not in _TASK_PAIRS:
        raise ConfigError(f"task vector {tau!r} does not match adapter {adapter!r}")
    z_t = np.asarray(z_t, dtype=np.float64)
    squeeze = z_t.ndim == 2
    zb = z_t[None] if squeeze else z_t
    grid = _grid_from_tokens(state, zb.shape[1])
    feats = assemble_features(zb, cond, t, grid)
    out = _net_forward_np(state, feats, state.tau(tau), (adapter,), _flat(zb))
    out = out.reshape(zb.shape)
    return out[0] if squeeze else out


def _grid_from_tokens(state: AdapterState, n_tokens):
    side = int(round(np.sqrt(n_tokens)))
    if side * side != n_tokens:
        raise ShapeError(f"token count {n_tokens} is not a square grid")
    return side, side


# ---------------------------------------------------------------------------
# Param groups
# ---------------------------------------------------------------------------


def _params_backbone(state):
    return {f"backbone.{k}": v for k, v in state.backbone.params().items()}


def _params_lora(state, name):
    return {f"{name}.{k}": v for k, v in state.lora(name).items()}


def phase_params(state: AdapterState, phase) -> dict:
    """Trainable parameter group for each phase; everything else is frozen."""
    if phase == "pretext":
        return {
            **_params_backbone(state),
            **_params_lora(state, "theta"),
            **_params_lora(state, "phi"),
        }
    if phase == "warmup_removal":
        return {**_params_lora(state, "phi"), "tau.removal": state.tau_removal}
    if phase == "warmup_insertion":
        return {**_params_lora(state, "theta"), "tau.insertion": state.tau_insertion}
    if phase == "cycleflow":
        return {**_params_lora(state, "theta"), "tau.insertion": state.tau_insertion}
    raise ConfigError(f"unknown phase {phase!r}")


# ---------------------------------------------------------------------------
# Corpus batcher
# ---------------------------------------------------------------------------


class SceneBatch:
    """Caches a corpus as uint8 arrays and serves float batches."""

    def __init__(self, corpus_dir, records=None):
        self.dir = Path(corpus_dir)
        self.records = records if records is not None else scenes.read_manifest(corpus_dir)
        self._cache = {}

    def __len__(self):
        return len(self.records)

    def sample(self, i) -> dict:
        if i not in self._cache:
            raw = scenes.load_sample(self.dir, self.records[i])
            packed = {
                "image": (raw["image"] * 255).astype(np.uint8),
                "mask": raw["mask"].astype(np.uint8),
                "reference": (raw["reference"] * 255).astype(np.uint8),
                "spec": raw["spec"],
            }
            if "removed" in raw:
                packed["removed"] = (raw["removed"] * 255).astype(np.uint8)
            self._cache[i] = packed
        p = self._cache[i]
        out = {
            "image": p["image"].astype(np.float64) / 255.0,
            "mask": p["mask"],
            "reference": p["reference"].astype(np.float64) / 255.0,
            "spec": p["spec"],
        }
        if "removed" in p:
            out["removed"] = p["removed"].astype(np.float64) / 255.0
        return out


# ---------------------------------------------------------------------------
# Training phases
# ---------------------------------------------------------------------------


class TrainLog:
    """JSON-lines training log: step, phase, loss, cycle_loss, gamma, wallclock."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")
        else:
            self._fh = None

    def emit(self, step, phase, loss, cycle_loss=None, gamma=None):
        row = {
            "step": int(step),
            "phase": phase,
            "loss": float(loss),
            "cycle_loss": None if cycle_loss is None else float(cycle_loss),
            "gamma": None if gamma is None else float(gamma),
            "wallclock": time.time(),
        }
        self.rows.append(row)
        if self._fh:
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def random_inpaint_mask(shape, rng) -> np.ndarray:
    """Irregular stroke/rectangle masks for the pretext inpainting task."""
    h, w = shape
    m = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ang = rng.uniform(0, 2 * np.pi)
        step_len = rng.uniform(2.0, 5.0)
        radius = rng.uniform(2.0, 5.0)
        for _seg in range(rng.integers(3, 9)):
            m |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
            ang += rng.uniform(-0.7, 0.7)
            cy += step_len * np.sin(ang)
            cx += step_len * np.cos(ang)
    if rng.random() < 0.5:
        ry, rx = rng.integers(4, max(h // 3, 5)), rng.integers(4, max(w // 3, 5))
        oy = rng.integers(0, h - ry)
        ox = rng.integers(0, w - rx)
        m[oy : oy + ry, ox : ox + rx] = True
    if not m.any():
        m[h // 2, w // 2] = True
    return m.astype(np.uint8)


def _draw_path(rng, z1):
    z0 = rng.normal(size=z1.shape)
    t = flowmatch.sample_train_time(rng, size=z1.shape[0])
    z_t = interp_batch(z0, z1, t)
    return z0, t, z_t


def interp_batch(z0, z1, t):
    """Linear path for a batch: t broadcast over (B, T, d)."""
    tb = np.asarray(t).reshape(-1, 1, 1)
    return tb * z1 + (1.0 - tb) * z0


def estimate_batch(z_t, u, t):
    tb = np.asarray(t).reshape(-1, 1, 1)
    return z_t + (1.0 - tb) * u


def _flat(z):
    return z.reshape(-1, z.shape[-1])


def train_pretext(
    batcher: SceneBatch,
    state: AdapterState,
    steps,
    lr=1e-3,
    batch_size=16,
    seed=0,
    log: TrainLog | None = None,
    adam=None,
    start_step=0,
) -> list:
    """Inpainting pretext: reconstruct images from randomly masked
    conditioning. Each draw uses either the full scene or its clean
    background, so the prior covers both object and background content.
    Trains the backbone jointly with both adapter sets (task vectors stay
    out, matching the task-free objective); afterwards the backbone is
    frozen by contract."""
    rng = np.random.default_rng(seed)
    params = phase_params(state, "pretext")
    if adam is None:
        adam = adam_init(params, lr=lr)
    enc = state.encoder
    losses = []
    for step in range(start_step, steps):
        idx = rng.integers(0, len(batcher), size=batch_size)
        images, conds = [], []
        for i in idx:
            s = batcher.sample(int(i))
            img = s["image"]
            if "removed" in s and rng.random() < 0.5:
                img = s["removed"]
            mask = random_inpaint_mask(img.shape[:2], rng)
            images.append(img)
            conds.append(scenes.masked_input(img, mask))
        z1 = enc.encode_batch(images)
        z_cx = enc.encode_batch(conds)
        z0, t, z_t = _draw_path(rng, z1)
        grid = enc.grid_shape(images[0].shape)
        feats = assemble_features(z_t, ConditionTokens(x=z_cx), t, grid)
        tape = Tape()
        refs: dict = {}
        out = _net_forward_tape(
            tape, refs, state, feats, None, ("theta", "phi"), set(params), _flat(z_t)
        )
        target = tape.const(_flat(z1 - z0))
        loss_ref = tape.mse(out, target)
        loss = float(tape.value(loss_ref))
        grads = backward(tape)
        named = {name: grads[ref] for name, ref in tape.named.items()}
        adam_step(adam, params, named)
        losses.append(loss)
        if log:
            log.emit(step, "pretext", loss)
    return losses


def _warmup_batch(batcher, idx, rng, aug_cfg, task):
    """Assemble (targets, cond images, refs) for one paired warmup batch."""
    targets, conds, objs = [], [], []
    for i in idx:
        s = batcher.sample(int(i))
        if task == "removal":
            m = maskops.augment_removal(s["mask"], aug_cfg, rng)
            targets.append(s["removed"])
            conds.append(scenes.masked_input(s["image"], m))
        else:
            m = maskops.augment_insertion(s["mask"], aug_cfg)
            targets.append(s["image"])
            conds.append(scenes.masked_input(s["removed"], m))
            objs.append(s["reference"])
    return targets, conds, objs


def train_warmup(
    batcher: SceneBatch,
    state: AdapterState,
    task,
    steps,
    lr=3e-4,
    batch_size=16,
    seed=0,
    aug_cfg: maskops.AugmentConfig | None = None,
    log: TrainLog | None = None,
    adam=None,
    start_step=0,
) -> list:
    """Paired warmup for one task; only its adapter and task vector move.

    Removal regresses toward the object-free target from the masked scene;
    insertion regresses toward the full scene from the masked object-free
    image plus the reference object, so effect synthesis is supervised.
    """
    if task not in ("removal", "insertion"):
        raise ConfigError(f"task must be removal or insertion, got {task!r}")
    adapter = "phi" if task == "removal" else "theta"
    phase = f"warmup_{task}"
    rng = np.random.default_rng(seed)
    aug_cfg = aug_cfg or maskops.AugmentConfig()
    params = phase_params(state, phase)
    if adam is None:
        adam = adam_init(params, lr=lr)
    enc = state.encoder
    before = backbone_checksum(state)
    losses = []
    for step in range(start_step, steps):
        idx = rng.integers(0, len(batcher), size=batch_size)
        targets, conds, objs = _warmup_batch(batcher, idx, rng, aug_cfg, task)
        z1 = enc.encode_batch(targets)
        cond = ConditionTokens(
            x=enc.encode_batch(conds),
            o=enc.encode_batch(objs) if objs else None,
        )
        z0, t, z_t = _draw_path(rng, z1)
        grid = enc.grid_shape(targets[0].shape)
        feats = assemble_features(z_t, cond, t, grid)
        tape = Tape()
        refs: dict = {}
        out = _net_forward_tape(
            tape, refs, state, feats, task, (adapter,), set(params), _flat(z_t)
        )
        loss_ref = tape.mse(out, tape.const(_flat(z1 - z0)))
        loss = float(tape.value(loss_ref))
        grads = backward(tape)
        named = {name: grads[ref] for name, ref in tape.named.items()}
        adam_step(adam, params, named)
        losses.append(loss)
        if log:
            log.emit(step, phase, loss)
    if backbone_checksum(state) != before:
        raise IntegrityError("backbone changed during a warmup phase")
    return losses


def cycleflow_F(state: AdapterState, z_t, x_tokens, t) -> np.ndarray:
    """One-step removal estimate of the clean-scene endpoint; never
    differentiated, mirroring the gradient-truncation contract."""
    u = velocity_net(state, z_t, ConditionTokens(x=x_tokens), t, "removal", "phi")
    if np.ndim(z_t) == 3:
        return estimate_batch(np.asarray(z_t, dtype=np.float64), u, t)
    return flowmatch.estimate_target(z_t, u, t)


def cycleflow_G(state: AdapterState, z_t_prime, cond: ConditionTokens, t_prime) -> np.ndarray:
    """One-step insertion estimate from a re-noised removal estimate."""
    u = velocity_net(state, z_t_prime, cond, t_prime, "insertion", "theta")
    if np.ndim(z_t_prime) == 3:
        return estimate_batch(np.asarray(z_t_prime, dtype=np.float64), u, t_prime)
    return flowmatch.estimate_target(z_t_prime, u, t_prime)


def cycle_loss(z1, reinserted) -> float:
    """Mean squared error between the reinserted estimate and the original."""
    return flowmatch.cfm_loss(reinserted, z1)


def train_cycleflow(
    batcher: SceneBatch,
    state: AdapterState,
    gamma,
    steps,
    lr=3e-4,
    batch_size=16,
    seed=0,
    aug_cfg: maskops.AugmentConfig | None = None,
    log: TrainLog | None = None,
    adam=None,
    start_step=0,
) -> list:
    """Unpaired post-training of the insertion adapter.

    Per batch, the insertion objective runs on the unpaired conditioning
    (which still contains object effects) while the cycle term re-inserts
    into the removal adapter's effect-free estimate and asks for the
    original latent back, weighted by gamma. The removal adapter only runs
    in plain numpy, so no gradient can reach it.
    """
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    rng = np.random.default_rng(seed)
    aug_cfg = aug_cfg or maskops.AugmentConfig()
    params = phase_params(state, "cycleflow")
    if adam is None:
        adam = adam_init(params, lr=lr)
    enc = state.encoder
    before_bb = backbone_checksum(state)
    before_phi = adapter_checksum(state, "phi")
    losses = []
    for step in range(start_step, steps):
        idx = rng.integers(0, len(batcher), size=batch_size)
        images, masks, objs, conds_w = [], [], [], []
        for i in idx:
            s = batcher.sample(int(i))
            m_ins = maskops.augment_insertion(s["mask"], aug_cfg)
            images.append(s["image"])
            masks.append(s["mask"])
            objs.append(s["reference"])
            conds_w.append(scenes.masked_input(s["image"], m_ins))
        z1 = enc.encode_batch(images)
        z_o = enc.encode_batch(objs)
        z0, t, z_t = _draw_path(rng, z1)
        grid = enc.grid_shape(images[0].shape)

        tape = Tape()
        refs: dict = {}
        # insertion objective on the unpaired conditioning
        cond_w = ConditionTokens(x=enc.encode_batch(conds_w), o=z_o)
        feats_w = assemble_features(z_t, cond_w, t, grid)
        out_w = _net_forward_tape(
            tape, refs, state, feats_w, "insertion", ("theta",), set(params), _flat(z_t)
        )
        loss_w_ref = tape.mse(out_w, tape.const(_flat(z1 - z0)))
        total_ref = loss_w_ref

        loss_c = None
        if gamma > 0:
            # removal direction, held constant
            x_rem = enc.encode_batch(
                [scenes.masked_input(img, m) for img, m in zip(images, masks)]
            )
            z1_rem = cycleflow_F(state, z_t, x_rem, t)
            pseudo = [
                np.clip(enc.decode(z1_rem[b], images[b].shape), 0.0, 1.0)
                for b in range(len(images))
            ]
            cond_g = ConditionTokens(
                x=enc.encode_batch(
                    [scenes.masked_input(p, m) for p, m in zip(pseudo, masks)]
                ),
                o=z_o,
            )
            z0p = rng.normal(size=z1.shape)
            tp = flowmatch.sample_train_time(rng, size=z1.shape[0])
            z_tp = interp_batch(z0p, z1_rem, tp)
            feats_g = assemble_features(z_tp, cond_g, tp, grid)
            out_g = _net_forward_tape(
                tape, refs, state, feats_g, "insertion", ("theta",), set(params), _flat(z_tp)
            )
            one_minus = np.repeat(1.0 - tp, z1.shape[1])[:, None]
            reinserted = tape.add(
                tape.const(_flat(z_tp)), tape.mul_const(out_g, one_minus)
            )
            loss_c_ref = tape.mse(reinserted, tape.const(_flat(z1)))
            loss_c = float(tape.value(loss_c_ref))
            total_ref = tape.add(loss_w_ref, tape.scale(loss_c_ref, gamma))

        loss_w = float(tape.value(loss_w_ref))
        total = float(tape.value(total_ref))
        grads = backward(tape)
        named = {name: grads[ref] for name, ref in tape.named.items()}
        adam_step(adam, params, named)
        losses.append(total)
        if log:
            log.emit(step, "cycleflow", loss_w, cycle_loss=loss_c, gamma=gamma)
    if backbone_checksum(state) != before_bb:
        raise IntegrityError("backbone changed during cycleflow")
    if adapter_checksum(state, "phi") != before_phi:
        raise IntegrityError("removal adapter changed during cycleflow")
    return losses


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def mean_fill(image, mask) -> np.ndarray:
    """Baseline edit: replace masked pixels with the mean unmasked color."""
    image = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    out = image.copy()
    fill = image[~m].reshape(-1, image.shape[-1]).mean(axis=0)
    out[m] = fill
    return out


def _sample(state, cond, grid, image_shape, nfe, rng, mask, source, margin):
    n_tok = grid[0] * grid[1]
    z0 = rng.normal(size=(n_tok, state.encoder.token_dim))
    tau, adapter = ("insertion", "theta") if cond.o is not None else ("removal", "phi")

    def velocity_fn(z, t_k):
        return velocity_net(state, z, cond, t_k, tau, adapter)

    z1 = flowmatch.euler_sample(velocity_fn, z0, flowmatch.SamplerConfig(nfe=nfe))
    raw = np.clip(state.encoder.decode(z1, image_shape), 0.0, 1.0)
    keep = maskops.dilate(mask, margin).astype(bool)
    return np.where(keep[..., None], raw, source)


def sample_removal(state: AdapterState, image, mask, nfe=28, rng=None, margin=COMPOSITE_MARGIN):
    """Remove the masked object (and its nearby effects) from the image."""
    if nfe < 1:
        raise ConfigError(f"nfe must be >= 1, got {nfe}")
    rng = rng if rng is not None else np.random.default_rng(0)
    x_img = scenes.masked_input(image, mask)
    cond = ConditionTokens(x=state.encoder.encode(x_img))
    grid = state.encoder.grid_shape(np.shape(image))
    return _sample(state, cond, grid, np.shape(image), nfe, rng, mask, x_img, margin)


def sample_insertion(
    state: AdapterState, image, mask, reference, nfe=28, rng=None, margin=COMPOSITE_MARGIN
):
    """Insert the reference object into the masked region of the image."""
    if nfe < 1:
        raise ConfigError(f"nfe must be >= 1, got {nfe}")
    rng = rng if rng is not None else np.random.default_rng(0)
    x_img = scenes.masked_input(image, mask)
    cond = ConditionTokens(
        x=state.encoder.encode(x_img), o=state.encoder.encode(reference)
    )
    grid = state.encoder.grid_shape(np.shape(image))
    return _sample(state, cond, grid, np.shape(image), nfe, rng, mask, x_img, margin)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_state(path, state: AdapterState, adam=None, extra=None) -> None:
    """Write the full editor state as named CFLAB1 sections."""
    meta = {
        "patch": np.float64(state.encoder.patch),
        "token_dim": np.float64(state.encoder.token_dim),
        "rank": np.float64(state.rank),
        "alpha": np.float64(state.alpha),
        "nonlin": np.float64(0.0 if state.backbone.nonlin == "tanh" else 1.0),
        "widths": np.asarray(state.backbone.widths, dtype=np.float64),
    }
    if extra:
        for k, v in extra.items():
            meta[k] = np.asarray(v, dtype=np.float64)
    sections = {
        "meta": meta,
        "backbone": state.backbone.params(),
        "lora_theta": dict(state.lora_theta),
        "lora_phi": dict(state.lora_phi),
        "tau_removal": {"tau": state.tau_removal},
        "tau_insertion": {"tau": state.tau_insertion},
    }
    if adam is not None:
        adam_sec = {
            "step": np.float64(adam.step),
            "lr": np.float64(adam.lr),
            "beta1": np.float64(adam.beta1),
            "beta2": np.float64(adam.beta2),
            "eps": np.float64(adam.eps),
        }
        for k in sorted(adam.m):
            adam_sec[f"m.{k}"] = adam.m[k]
            adam_sec[f"v.{k}"] = adam.v[k]
        sections["adam"] = adam_sec
    write_checkpoint(path, sections)


def load_state(path):
    """Read a checkpoint; returns (state, adam_or_None, meta_dict)."""
    sections = read_checkpoint(path)
    meta = sections["meta"]
    widths = [int(v) for v in meta["widths"]]
    nonlin = "tanh" if float(meta["nonlin"]) == 0.0 else "gelu"
    n_layers = len(widths) - 1
    backbone = Mlp(
        widths,
        [sections["backbone"][f"w{i}"] for i in range(n_layers)],
        [sections["backbone"][f"b{i}"] for i in range(n_layers)],
        nonlin,
    )
    state = AdapterState(
        encoder=PatchEncoder(int(meta["patch"]), int(meta["token_dim"])),
        backbone=backbone,
        lora_theta=dict(sections["lora_theta"]),
        lora_phi=dict(sections["lora_phi"]),
        tau_removal=sections["tau_removal"]["tau"],
        tau_insertion=sections["tau_insertion"]["tau"],
        rank=int(meta["rank"]),
        alpha=float(meta["alpha"]),
    )
    adam = None
    if "adam" in sections:
        sec = sections["adam"]
        from .numerics import AdamState

        adam = AdamState(
            lr=float(sec["lr"]),
            beta1=float(sec["beta1"]),
            beta2=float(sec["beta2"]),
            eps=float(sec["eps"]),
            step=int(sec["step"]),
        )
        for k in sec:
            if k.startswith("m."):
                adam.m[k[2:]] = sec[k]
            elif k.startswith("v."):
                adam.v[k[2:]] = sec[k]
    meta_out = {k: v for k, v in meta.items()}
    return state, adam, meta_out
