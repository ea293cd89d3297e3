"""Adapter training: next-token loss over document/question/answer sequences.

Each augmentation triple becomes [BOS] d [SEP] q [SEP] a [EOS]; the loss
covers every position except BOS (and PAD when batching), so document and
question tokens are learned, not just answers. Only the adapter factors
receive gradient; the base model is byte-identical before and after.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterConfig, LowRankAdapter, new_random
from .errors import FingerprintMismatch, NonFiniteLoss, Overlong
from .model import (
    FactorDeltas,
    ModelParams,
    backward_batch,
    forward_batch,
    loss_and_dlogits,
)
from .optim import clip_by_global_norm, make_optimizer
from .text import BOS_ID, EOS_ID, SEP_ID, encode_bytes

WARMUP_DOC_ID = 0


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 3e-4
    epochs: int = 1
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    dropout: float = 0.0
    grad_clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.dropout != 0.0:
            raise ValueError("dropout is fixed at 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    final_loss: float = float("nan")
    tokens: int = 0
    seconds: float = 0.0
    clip_events: int = 0


def build_sequence(triple, max_seq_len: int):
    """[BOS] d [SEP] q [SEP] a [EOS] plus a loss mask that is False at BOS only.

    When the sequence is too long the document loses its head (the tail stays);
    the question and answer are never truncated.
    """
    d, q, a = triple
    if not a:
        raise ValueError("answer must be non-empty")
    d_ids = encode_bytes(d)
    q_ids = encode_bytes(q)
    a_ids = encode_bytes(a)
    budget = max_seq_len - 4 - len(q_ids) - len(a_ids)
    if budget < 0:
        raise Overlong(
            f"question+answer need {len(q_ids) + len(a_ids) + 4} tokens, "
            f"context is {max_seq_len}")
    if len(d_ids) > budget:
        d_ids = d_ids[len(d_ids) - budget:]
    ids = [BOS_ID] + d_ids + [SEP_ID] + q_ids + [SEP_ID] + a_ids + [EOS_ID]
    mask = [False] + [True] * (len(ids) - 1)
    return ids, mask


def build_qa_sequence(pair, max_seq_len: int):
    """[BOS] q [SEP] a [EOS] for warm-up training."""
    q, a = pair
    q_ids = encode_bytes(q)
    a_ids = encode_bytes(a)
    ids = [BOS_ID] + q_ids + [SEP_ID] + a_ids + [EOS_ID]
    if len(ids) > max_seq_len:
        raise Overlong(f"QA pair needs {len(ids)} tokens, context is {max_seq_len}")
    mask = [False] + [True] * (len(ids) - 1)
    return ids, mask


def _adapter_param_dict(adapter: LowRankAdapter) -> dict:
    params = {}
    for (layer, tag), (a_mat, b_mat) in adapter.matrices.items():
        params[f"adapter.{layer}.{tag}.A"] = a_mat.copy()
        params[f"adapter.{layer}.{tag}.B"] = b_mat.copy()
    return params


def _params_to_matrices(params: dict) -> dict:
    matrices = {}
    for name, arr in params.items():
        _, layer, tag, which = name.split(".")
        key = (int(layer), tag)
        a_mat, b_mat = matrices.get(key, (None, None))
        if which == "A":
            matrices[key] = (arr, b_mat)
        else:
            matrices[key] = (a_mat, arr)
    return matrices


def _factor_deltas(params: dict, scale: float) -> FactorDeltas:
    return FactorDeltas(factors=_params_to_matrices(params), scale=scale)


def _train_on_sequences(base: ModelParams, sequences, init: LowRankAdapter,
                        hyper: TrainHyper):
    if init.model_fingerprint != base.fingerprint:
        raise FingerprintMismatch(
            f"adapter fingerprint {init.model_fingerprint:#018x} "
            f"!= base {base.fingerprint:#018x}")
    config = base.config
    scale = init.config.scale
    params = _adapter_param_dict(init)
    optimizer = make_optimizer(hyper.optimizer, list(params), hyper.learning_rate,
                               beta1=hyper.beta1, beta2=hyper.beta2,
                               eps=hyper.eps, weight_decay=hyper.weight_decay)
    rng = np.random.default_rng(hyper.seed)
    report = TrainReport()
    start = time.perf_counter()
    step = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(len(sequences))
        epoch_losses = []
        for idx in order:
            ids, mask = sequences[idx]
            tokens = np.asarray(ids, dtype=np.int64)[None, :]
            inputs, targets = tokens[:, :-1], tokens[:, 1:]
            tmask = np.asarray(mask[1:], dtype=bool)

            cache = {}
            delta = _factor_deltas(params, scale)
            logits = forward_batch(base.tensors, config, inputs, delta=delta, cache=cache)
            loss, dflat = loss_and_dlogits(logits.reshape(-1, logits.shape[-1]),
                                           targets.reshape(-1), tmask)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at step {step}")
            grads = backward_batch(base.tensors, config, cache,
                                   dflat.reshape(logits.shape), delta=delta,
                                   want_base=False, want_adapter=True)
            norm = clip_by_global_norm(grads, hyper.grad_clip_norm)
            if hyper.grad_clip_norm > 0 and norm > hyper.grad_clip_norm:
                report.clip_events += 1
            optimizer.step(params, grads)
            epoch_losses.append(loss)
            report.tokens += len(ids)
            step += 1
        report.epoch_losses.append(sum(epoch_losses) / len(epoch_losses))
    report.final_loss = report.epoch_losses[-1]
    report.seconds = time.perf_counter() - start

    trained = LowRankAdapter(doc_id=init.doc_id,
                             model_fingerprint=init.model_fingerprint,
                             config=init.config,
                             matrices=_params_to_matrices(params))
    return trained, report


def train_adapter(base: ModelParams, dataset, init: LowRankAdapter,
                  hyper: TrainHyper):
    """Train one document's adapter on its augmentation triples (batch size 1)."""
    sequences = [build_sequence(t, base.config.max_seq_len) for t in dataset.triples()]
    return _train_on_sequences(base, sequences, init, hyper)


def warmup_init(base: ModelParams, qa_pairs, hyper: TrainHyper,
                adapter_config: AdapterConfig | None = None) -> LowRankAdapter:
    """Adapter pre-trained on task-style QA pairs, used as per-document init."""
    qa_pairs = list(qa_pairs)
    if not qa_pairs:
        raise ValueError("warm-up requires at least one QA pair")
    adapter_config = adapter_config or AdapterConfig()
    init = new_random(adapter_config, base, doc_id=WARMUP_DOC_ID, seed=hyper.seed)
    sequences = [build_qa_sequence(p, base.config.max_seq_len) for p in qa_pairs]
    trained, _ = _train_on_sequences(base, sequences, init, hyper)
    return trained


def reseed_adapter(adapter: LowRankAdapter, doc_id: int) -> LowRankAdapter:
    """The same factors bound to a different document id (warm-up reuse)."""
    return LowRankAdapter(doc_id=doc_id, model_fingerprint=adapter.model_fingerprint,
                          config=adapter.config,
                          matrices={k: (a.copy(), b.copy())
                                    for k, (a, b) in adapter.matrices.items()})


# ---------------------------------------------------------------------------
# gradient oracles


def central_difference(fn, value: float, epsilon: float) -> float:
    """(f(v+eps) - f(v-eps)) / 2 eps for a scalar-to-scalar probe."""
    return (fn(value + epsilon) - fn(value - epsilon)) / (2.0 * epsilon)


def adapter_loss_fp64(base: ModelParams, factors: dict, scale: float,
                      sequence, mask) -> float:
    """Training loss of one sequence in fp64 given explicit adapter factors."""
    tensors = base.as_dtype(np.float64)
    tokens = np.asarray(sequence, dtype=np.int64)[None, :]
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    tmask = np.asarray(mask[1:], dtype=bool)
    delta = FactorDeltas(factors=factors, scale=scale)
    logits = forward_batch(tensors, base.config, inputs, delta=delta)
    loss, _ = loss_and_dlogits(logits.reshape(-1, logits.shape[-1]),
                               targets.reshape(-1), tmask)
    return loss


def analytic_adapter_grads(base: ModelParams, adapter: LowRankAdapter,
                           sequence, mask, dtype=np.float64) -> dict:
    """Closed-form adapter gradients of the training loss for one sequence."""
    tensors = base.as_dtype(dtype)
    factors = {key: (a.astype(dtype), b.astype(dtype))
               for key, (a, b) in adapter.matrices.items()}
    tokens = np.asarray(sequence, dtype=np.int64)[None, :]
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    tmask = np.asarray(mask[1:], dtype=bool)
    delta = FactorDeltas(factors=factors, scale=adapter.config.scale)
    cache = {}
    logits = forward_batch(tensors, base.config, inputs, delta=delta, cache=cache)
    _, dflat = loss_and_dlogits(logits.reshape(-1, logits.shape[-1]),
                                targets.reshape(-1), tmask)
    return backward_batch(tensors, base.config, cache, dflat.reshape(logits.shape),
                          delta=delta, want_base=False, want_adapter=True)


def finite_diff_grad(base: ModelParams, adapter: LowRankAdapter, sequence, mask,
                     epsilon: float = 1e-5, samples_per_tensor: int = 32,
                     seed: int = 0) -> dict:
    """Central-difference adapter gradients in fp64, subsampled per tensor.

    Returns {param_name: {flat_index: gradient}} for the sampled coordinates.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    factors = {key: (a.astype(np.float64), b.astype(np.float64))
               for key, (a, b) in adapter.matrices.items()}
    scale = adapter.config.scale
    rng = np.random.default_rng(seed)
    result = {}
    for (layer, tag), (a_mat, b_mat) in sorted(factors.items()):
        for which, mat in (("A", a_mat), ("B", b_mat)):
            size = mat.size
            count = min(samples_per_tensor, size)
            indices = sorted(rng.choice(size, size=count, replace=False).tolist())
            grads = {}
            flat = mat.reshape(-1)
            for idx in indices:
                original = flat[idx]
                flat[idx] = original + epsilon
                up = adapter_loss_fp64(base, factors, scale, sequence, mask)
                flat[idx] = original - epsilon
                down = adapter_loss_fp64(base, factors, scale, sequence, mask)
                flat[idx] = original
                grads[int(idx)] = (up - down) / (2.0 * epsilon)
            result[f"adapter.{layer}.{tag}.{which}"] = grads
    return result
