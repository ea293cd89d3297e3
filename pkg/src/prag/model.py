"""Decoder-only transformer with hand-written forward and backward passes.

Pre-norm blocks, learned absolute positions, multi-head causal attention,
and a two-matrix GELU feed-forward (no gating). All arithmetic is fp32 by
default; every routine follows the dtype of the tensors it is given, so the
same code runs in fp64 for gradient checking.

Low-rank deltas attach to the FFN matrices only. The forward pass evaluates
``x @ W + x @ dW`` (dense merged delta) or ``s * (x @ A) @ B.T`` (factored
adapter during training); base tensors are never modified.
"""

import hashlib
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllMasked,
    BadMagic,
    ChecksumMismatch,
    EmptyText,
    FingerprintMismatch,
    SeqTooLong,
    TruncatedPayload,
    VersionUnsupported,
)
from .optim import clip_by_global_norm, make_optimizer
from .text import BOS_ID, EOS_ID, PAD_ID, SEP_ID, VOCAB_SIZE, encode_bytes

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"PRAGBASE"
CHECKPOINT_VERSION = 1

FFN_UP = "up"
FFN_DOWN = "down"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    hidden: int = 128
    ffn_intermediate: int = 512
    n_heads: int = 4
    vocab: int = VOCAB_SIZE
    max_seq_len: int = 512

    def __post_init__(self):
        if min(self.n_layers, self.hidden, self.ffn_intermediate,
               self.n_heads, self.vocab, self.max_seq_len) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")

    def param_shapes(self) -> dict:
        """Tensor names and shapes in declared (checkpoint) order."""
        h, l, v = self.hidden, self.ffn_intermediate, self.vocab
        shapes = {"tok_emb": (v, h), "pos_emb": (self.max_seq_len, h)}
        for i in range(self.n_layers):
            p = f"layers.{i}."
            shapes[p + "ln1_g"] = (h,)
            shapes[p + "ln1_b"] = (h,)
            shapes[p + "wq"] = (h, h)
            shapes[p + "wk"] = (h, h)
            shapes[p + "wv"] = (h, h)
            shapes[p + "wo"] = (h, h)
            shapes[p + "ln2_g"] = (h,)
            shapes[p + "ln2_b"] = (h,)
            shapes[p + "w_up"] = (h, l)
            shapes[p + "w_down"] = (l, h)
        shapes["lnf_g"] = (h,)
        shapes["lnf_b"] = (h,)
        shapes["head"] = (h, v)
        return shapes

    def ffn_shape(self, tag: str) -> tuple:
        if tag == FFN_UP:
            return (self.hidden, self.ffn_intermediate)
        if tag == FFN_DOWN:
            return (self.ffn_intermediate, self.hidden)
        raise ValueError(f"unknown FFN tag {tag!r}")


def _config_bytes(config: ModelConfig) -> bytes:
    return struct.pack(
        "<6I", config.n_layers, config.hidden, config.ffn_intermediate,
        config.n_heads, config.vocab, config.max_seq_len)


def compute_fingerprint(config: ModelConfig, tensors: dict) -> int:
    """64-bit hash over architecture and weight bytes in declared order."""
    h = hashlib.blake2b(digest_size=8)
    h.update(_config_bytes(config))
    for name in config.param_shapes():
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return int.from_bytes(h.digest(), "little")


class ModelParams:
    """Frozen base weights plus config; arrays are read-only after construction."""

    def __init__(self, config: ModelConfig, tensors: dict):
        shapes = config.param_shapes()
        missing = set(shapes) - set(tensors)
        if missing:
            raise ValueError(f"missing tensors: {sorted(missing)}")
        self.config = config
        self.tensors = {}
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            if arr.shape != shape:
                raise ValueError(f"tensor {name} has shape {arr.shape}, expected {shape}")
            arr.flags.writeable = False
            self.tensors[name] = arr
        self.fingerprint = compute_fingerprint(config, self.tensors)

    def as_dtype(self, dtype) -> dict:
        """Writable copy of all tensors in the given dtype (for training / fp64 checks)."""
        return {name: arr.astype(dtype) for name, arr in self.tensors.items()}


@dataclass(frozen=True)
class EffectiveWeights:
    """Base params paired with an optional merged FFN delta; base is never mutated."""

    base: ModelParams
    delta: object | None = None  # exposes .model_fingerprint and .dense_tensors()


@dataclass(frozen=True)
class FactorDeltas:
    """Low-rank FFN perturbation in factored form, used during adapter training.

    factors maps (layer, tag) -> (A, B); the contribution is scale * (x @ A) @ B.T.
    """

    factors: dict
    scale: float


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    std = 0.02
    resid_std = std / np.sqrt(2.0 * config.n_layers)
    tensors = {}
    for name, shape in config.param_shapes().items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif short.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif short in ("wo", "w_down"):
            tensors[name] = rng.normal(0.0, resid_std, size=shape).astype(np.float32)
        else:
            tensors[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward / backward


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, dtype=x.dtype))
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    return dx, dg, db


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _gelu(x):
    # multiplies, not x ** 3: fp32 pow falls back to scalar libm and dominates runtime
    inner = x * x
    inner *= _GELU_A
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    t = np.tanh(inner)
    out = 1.0 + t
    out *= x
    out *= 0.5
    return out, t


def _gelu_backward(dy, x, t):
    inner = x * x
    inner *= 3.0 * _GELU_A
    inner += 1.0
    inner *= _GELU_C
    grad = t * t
    np.subtract(1.0, grad, out=grad)
    grad *= inner
    grad *= x
    grad += 1.0
    grad += t
    grad *= 0.5
    grad *= dy
    return grad


def _split_heads(x, n_heads):
    b, t, h = x.shape
    return x.reshape(b, t, n_heads, h // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, nh, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * dh)


def _softmax(x):
    out = x - x.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def _causal_mask(t, dtype):
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def _ffn_delta_terms(delta, layer):
    """Resolve the (up, down) delta appliers for one layer, or (None, None)."""
    if delta is None:
        return None, None
    if isinstance(delta, FactorDeltas):
        return (("factor", *delta.factors[(layer, FFN_UP)], delta.scale),
                ("factor", *delta.factors[(layer, FFN_DOWN)], delta.scale))
    dense = delta.dense_tensors()
    return (("dense", dense[(layer, FFN_UP)]), ("dense", dense[(layer, FFN_DOWN)]))


def _apply_delta(x, term, cache_slot=None):
    """Add one delta contribution to x @ W; returns the contribution."""
    kind = term[0]
    if kind == "dense":
        return x @ term[1].astype(x.dtype, copy=False)
    _, a_mat, b_mat, scale = term
    p = x @ a_mat.astype(x.dtype, copy=False)
    if cache_slot is not None:
        cache_slot.append(p)
    return np.asarray(scale, dtype=x.dtype) * (p @ b_mat.T.astype(x.dtype, copy=False))


def forward_batch(tensors, config, tokens, delta=None, cache=None, last_only=False):
    """Forward pass over a (B, T) token batch; returns (B, T, vocab) logits.

    ``cache`` (a dict) is filled with every intermediate needed by
    ``backward_batch`` when provided. ``last_only`` restricts the head
    projection to the final position (generation fast path).
    """
    tokens = np.asarray(tokens)
    b, t = tokens.shape
    dtype = tensors["tok_emb"].dtype
    x = tensors["tok_emb"][tokens] + tensors["pos_emb"][:t]
    mask = _causal_mask(t, dtype)
    scale = np.asarray(1.0 / np.sqrt(config.hidden // config.n_heads), dtype=dtype)

    rec = cache is not None
    if rec:
        cache["tokens"] = tokens
        cache["layers"] = []

    for i in range(config.n_layers):
        p = f"layers.{i}."
        lcache = {}
        if rec:
            lcache["x_in"] = x
        h1, ln1_cache = _layernorm(x, tensors[p + "ln1_g"], tensors[p + "ln1_b"])
        q = _split_heads(h1 @ tensors[p + "wq"], config.n_heads)
        k = _split_heads(h1 @ tensors[p + "wk"], config.n_heads)
        v = _split_heads(h1 @ tensors[p + "wv"], config.n_heads)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + mask)
        o = _merge_heads(att @ v)
        x = x + o @ tensors[p + "wo"]

        up_term, down_term = _ffn_delta_terms(delta, i)
        u, ln2_cache = _layernorm(x, tensors[p + "ln2_g"], tensors[p + "ln2_b"])
        pre = u @ tensors[p + "w_up"]
        up_p = [] if rec else None
        if up_term is not None:
            pre = pre + _apply_delta(u, up_term, up_p)
        act, tanh_cache = _gelu(pre)
        ff = act @ tensors[p + "w_down"]
        down_p = [] if rec else None
        if down_term is not None:
            ff = ff + _apply_delta(act, down_term, down_p)
        x_mid = x
        x = x + ff

        if rec:
            lcache.update(h1=h1, ln1=ln1_cache, q=q, k=k, v=v, att=att, o=o,
                          x_mid=x_mid, u=u, ln2=ln2_cache, pre=pre, tanh=tanh_cache,
                          act=act, up_p=up_p, down_p=down_p)
            cache["layers"].append(lcache)

    xf, lnf_cache = _layernorm(x, tensors["lnf_g"], tensors["lnf_b"])
    if rec:
        cache["xf"] = xf
        cache["lnf"] = lnf_cache
        cache["mask_scale"] = scale
    if last_only:
        return xf[:, -1:, :] @ tensors["head"]
    return xf @ tensors["head"]


def backward_batch(tensors, config, cache, dlogits, delta=None,
                   want_base=True, want_adapter=False):
    """Backward pass from dlogits; returns grads keyed like params.

    Adapter gradients (when requested) are keyed ``adapter.{layer}.{tag}.A/B``
    and require the forward to have run with a FactorDeltas delta.
    """
    grads = {}
    xf = cache["xf"]
    flat_xf = xf.reshape(-1, xf.shape[-1])
    flat_dlogits = dlogits.reshape(-1, dlogits.shape[-1])
    if want_base:
        grads["head"] = flat_xf.T @ flat_dlogits
    dxf = dlogits @ tensors["head"].T
    dx, dg, db = _layernorm_backward(dxf, tensors["lnf_g"], cache["lnf"])
    if want_base:
        grads["lnf_g"] = dg
        grads["lnf_b"] = db

    scale = cache["mask_scale"]
    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        lc = cache["layers"][i]
        up_term, down_term = _ffn_delta_terms(delta, i)

        # FFN block: x = x_mid + ff(u(x_mid))
        dff = dx
        act = lc["act"]
        flat_act = act.reshape(-1, act.shape[-1])
        flat_dff = dff.reshape(-1, dff.shape[-1])
        if want_base:
            grads[p + "w_down"] = flat_act.T @ flat_dff
        dact = dff @ tensors[p + "w_down"].T
        if down_term is not None:
            if down_term[0] == "dense":
                dact = dact + dff @ down_term[1].astype(dff.dtype, copy=False).T
            else:
                _, a_mat, b_mat, s = down_term
                s = np.asarray(s, dtype=dff.dtype)
                proj = lc["down_p"][0]
                d_proj = s * (dff @ b_mat.astype(dff.dtype, copy=False))
                if want_adapter:
                    grads[f"adapter.{i}.{FFN_DOWN}.B"] = s * (
                        flat_dff.T @ proj.reshape(-1, proj.shape[-1]))
                    grads[f"adapter.{i}.{FFN_DOWN}.A"] = (
                        flat_act.T @ d_proj.reshape(-1, d_proj.shape[-1]))
                dact = dact + d_proj @ a_mat.astype(dff.dtype, copy=False).T

        dpre = _gelu_backward(dact, lc["pre"], lc["tanh"])
        u = lc["u"]
        flat_u = u.reshape(-1, u.shape[-1])
        flat_dpre = dpre.reshape(-1, dpre.shape[-1])
        if want_base:
            grads[p + "w_up"] = flat_u.T @ flat_dpre
        du = dpre @ tensors[p + "w_up"].T
        if up_term is not None:
            if up_term[0] == "dense":
                du = du + dpre @ up_term[1].astype(dpre.dtype, copy=False).T
            else:
                _, a_mat, b_mat, s = up_term
                s = np.asarray(s, dtype=dpre.dtype)
                proj = lc["up_p"][0]
                d_proj = s * (dpre @ b_mat.astype(dpre.dtype, copy=False))
                if want_adapter:
                    grads[f"adapter.{i}.{FFN_UP}.B"] = s * (
                        flat_dpre.T @ proj.reshape(-1, proj.shape[-1]))
                    grads[f"adapter.{i}.{FFN_UP}.A"] = (
                        flat_u.T @ d_proj.reshape(-1, d_proj.shape[-1]))
                du = du + d_proj @ a_mat.astype(dpre.dtype, copy=False).T

        du_x, dg2, db2 = _layernorm_backward(du, tensors[p + "ln2_g"], lc["ln2"])
        if want_base:
            grads[p + "ln2_g"] = dg2
            grads[p + "ln2_b"] = db2
        dx_mid = dx + du_x

        # attention block: x_mid = x_in + attn(h1(x_in)) @ wo
        o = lc["o"]
        flat_o = o.reshape(-1, o.shape[-1])
        flat_dxmid = dx_mid.reshape(-1, dx_mid.shape[-1])
        if want_base:
            grads[p + "wo"] = flat_o.T @ flat_dxmid
        do = _split_heads(dx_mid @ tensors[p + "wo"].T, config.n_heads)
        att, q, k, v = lc["att"], lc["q"], lc["k"], lc["v"]
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = ds @ k * scale
        dk = ds.transpose(0, 1, 3, 2) @ q * scale
        dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        h1 = lc["h1"]
        flat_h1 = h1.reshape(-1, h1.shape[-1])
        if want_base:
            grads[p + "wq"] = flat_h1.T @ dq_m.reshape(-1, dq_m.shape[-1])
            grads[p + "wk"] = flat_h1.T @ dk_m.reshape(-1, dk_m.shape[-1])
            grads[p + "wv"] = flat_h1.T @ dv_m.reshape(-1, dv_m.shape[-1])
        dh1 = dq_m @ tensors[p + "wq"].T + dk_m @ tensors[p + "wk"].T + dv_m @ tensors[p + "wv"].T
        dh1_x, dg1, db1 = _layernorm_backward(dh1, tensors[p + "ln1_g"], lc["ln1"])
        if want_base:
            grads[p + "ln1_g"] = dg1
            grads[p + "ln1_b"] = db1
        dx = dx_mid + dh1_x

    if want_base:
        tokens = cache["tokens"]
        dtok = np.zeros_like(tensors["tok_emb"])
        np.add.at(dtok, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
        grads["tok_emb"] = dtok
        dpos = np.zeros_like(tensors["pos_emb"])
        dpos[:tokens.shape[1]] = dx.sum(axis=0)
        grads["pos_emb"] = dpos
    return grads


# ---------------------------------------------------------------------------
# public single-sequence API


def _check_delta_fingerprint(weights: EffectiveWeights):
    if weights.delta is not None:
        fp = getattr(weights.delta, "model_fingerprint", None)
        if fp is not None and fp != weights.base.fingerprint:
            raise FingerprintMismatch(
                f"delta fingerprint {fp:#018x} != base {weights.base.fingerprint:#018x}")


def _as_effective(weights) -> EffectiveWeights:
    if isinstance(weights, ModelParams):
        return EffectiveWeights(base=weights, delta=None)
    return weights


def forward(weights, tokens) -> np.ndarray:
    """Logits (seq_len, vocab) for one token sequence."""
    weights = _as_effective(weights)
    _check_delta_fingerprint(weights)
    config = weights.base.config
    tokens = np.asarray(list(tokens), dtype=np.int64)
    if tokens.ndim != 1 or not 1 <= tokens.size <= config.max_seq_len:
        raise SeqTooLong(
            f"sequence length {tokens.size} outside 1..{config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab:
        raise ValueError("token id outside vocabulary")
    logits = forward_batch(weights.base.tensors, config, tokens[None, :],
                           delta=weights.delta)
    return logits[0]


def lm_loss(logits, targets, mask) -> float:
    """Mean negative log-likelihood over unmasked positions."""
    logits = np.asarray(logits)
    targets = np.asarray(list(targets), dtype=np.int64)
    mask = np.asarray(list(mask), dtype=bool)
    if logits.shape[0] != targets.shape[0] or targets.shape[0] != mask.shape[0]:
        raise ValueError("logits, targets and mask lengths must agree")
    if not mask.any():
        raise AllMasked("no unmasked positions to compute a loss over")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    nll = logz - shifted[np.arange(targets.shape[0]), targets]
    return float(nll[mask].mean())


def loss_and_dlogits(logits, targets, mask):
    """Loss plus its gradient w.r.t. logits (for training loops)."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise AllMasked("no unmasked positions to compute a loss over")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    rows = np.arange(targets.shape[0])
    nll = np.log(z[:, 0]) - shifted[rows, targets]
    loss = float(nll[mask].mean())
    dlogits = probs
    dlogits[rows, targets] -= 1.0
    weight = (mask.astype(logits.dtype) / n)[:, None]
    dlogits *= weight
    return loss, dlogits


def generate_greedy(weights, prompt, max_new: int) -> list[int]:
    """Greedy decode: append argmax tokens (ties -> lowest id) until EOS or max_new."""
    weights = _as_effective(weights)
    _check_delta_fingerprint(weights)
    config = weights.base.config
    seq = [int(t) for t in prompt]
    if not seq:
        raise ValueError("prompt must be non-empty")
    if len(seq) + max_new > config.max_seq_len:
        raise SeqTooLong(
            f"prompt {len(seq)} + max_new {max_new} exceeds context {config.max_seq_len}")
    for _ in range(max_new):
        tokens = np.asarray(seq, dtype=np.int64)[None, :]
        logits = forward_batch(weights.base.tensors, config, tokens,
                               delta=weights.delta, last_only=True)
        nxt = int(np.argmax(logits[0, -1]))
        seq.append(nxt)
        if nxt == EOS_ID:
            break
    return seq


# ---------------------------------------------------------------------------
# base-model pretraining


# Byte 0x1E (ASCII record separator) in pretraining text becomes the SEP
# token, so the base model learns the separator convention that training
# sequences and warm-up sequences use.
SEP_BYTE = 0x1E


def _text_to_sequences(corpus_text: str, max_seq_len: int) -> list[list[int]]:
    """Blank-line blocks wrapped in BOS/EOS; overlong blocks are chunked."""
    sequences = []
    body_limit = max_seq_len - 2
    for block in corpus_text.split("\n\n"):
        block = block.strip()
        if not block:
            continue
        ids = [SEP_ID if b == SEP_BYTE else b for b in encode_bytes(block)]
        for start in range(0, len(ids), body_limit):
            chunk = ids[start:start + body_limit]
            sequences.append([BOS_ID] + chunk + [EOS_ID])
    return sequences


def _pad_batch(seqs):
    width = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for row, seq in enumerate(seqs):
        tokens[row, :len(seq)] = seq
    return tokens


def pretrain_base(corpus_text: str, config: ModelConfig, steps: int, seed: int,
                  lr: float = 1e-3, lr_min: float | None = None,
                  batch_size: int = 16, grad_clip: float = 1.0,
                  log_every: int = 0):
    """Full-parameter next-token training on a text corpus.

    Returns (ModelParams, per-step losses). Deterministic given the seed.
    ``lr_min`` turns on cosine decay from lr down to lr_min over the run.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    sequences = _text_to_sequences(corpus_text, config.max_seq_len)
    if not sequences:
        raise EmptyText("pretraining corpus is empty")

    params = init_params(config, seed).as_dtype(np.float32)
    rng = np.random.default_rng(seed)
    optimizer = make_optimizer("adamw", list(params), lr)

    def batch_plan():
        """Shuffle, then length-sort within small windows to limit pad waste."""
        order = rng.permutation(len(sequences)).tolist()
        window = max(batch_size * 8, 1)
        batches = []
        for start_idx in range(0, len(order), window):
            chunk = sorted(order[start_idx:start_idx + window],
                           key=lambda i: (len(sequences[i]), i))
            for j in range(0, len(chunk), batch_size):
                batches.append(chunk[j:j + batch_size])
        return batches

    plan = batch_plan()
    cursor = 0
    losses = []
    start = time.perf_counter()
    for step in range(steps):
        if lr_min is not None:
            progress = step / max(steps - 1, 1)
            optimizer.lr = lr_min + 0.5 * (lr - lr_min) * (1.0 + np.cos(np.pi * progress))
        if cursor == len(plan):
            plan = batch_plan()
            cursor = 0
        batch = [sequences[i] for i in plan[cursor]]
        cursor += 1
        tokens = _pad_batch(batch)
        inputs = tokens[:, :-1]
        targets = tokens[:, 1:]
        mask = targets != PAD_ID

        cache = {}
        logits = forward_batch(params, config, inputs, cache=cache)
        flat_logits = logits.reshape(-1, logits.shape[-1])
        loss, flat_dlogits = loss_and_dlogits(
            flat_logits, targets.reshape(-1), mask.reshape(-1))
        grads = backward_batch(params, config, cache,
                               flat_dlogits.reshape(logits.shape))
        clip_by_global_norm(grads, grad_clip)
        optimizer.step(params, grads)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            window = losses[-log_every:]
            print(f"step {step + 1}/{steps} loss {sum(window) / len(window):.4f} "
                  f"({time.perf_counter() - start:.1f}s)")
    return ModelParams(config, params), losses


# ---------------------------------------------------------------------------
# checkpoint IO


def save_checkpoint(params: ModelParams, path) -> None:
    config = params.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(_config_bytes(config))
        fh.write(struct.pack("<Q", params.fingerprint))
        for name in config.param_shapes():
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise BadMagic("not a base-model checkpoint")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise VersionUnsupported(f"checkpoint version {version}")
    fields = struct.unpack_from("<6I", blob, 12)
    config = ModelConfig(*fields[:4], vocab=fields[4], max_seq_len=fields[5])
    (fingerprint,) = struct.unpack_from("<Q", blob, 36)
    offset = 44
    tensors = {}
    for name, shape in config.param_shapes().items():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise TruncatedPayload(f"checkpoint ends inside tensor {name}")
        tensors[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape)
        offset = end
    params = ModelParams(config, tensors)
    if params.fingerprint != fingerprint:
        raise ChecksumMismatch("checkpoint fingerprint does not match tensor bytes")
    return params
