"""
Forward and backward passes of the transformer

Pre-layernorm encoder blocks (multi-head self-attention, GELU feed-forward)
over summed token/age/year/segment/position embeddings. The MLM head scores
every position over V tokens; the next-visit head scores the CLS position
over G groups. Gradients are computed analytically and work in whatever
float dtype the parameters carry.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .base import DataValidationError
from .behrt import ModelParams, ParamGradients, Task
from .sequence import SequenceBatch

logger = logging.getLogger("flask.app")

LAYERNORM_EPS = 1e-12
MASK_PENALTY = -1e9
GELU_COEF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


######################################################################
#  P R I M I T I V E S
######################################################################
def _layer_norm(x, gain, bias):
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + LAYERNORM_EPS)
    normed = centered * inv_std
    return normed * gain + bias, (normed, inv_std)


def _layer_norm_backward(grad, gain, cache):
    normed, inv_std = cache
    width = grad.shape[-1]
    grad_gain = (grad * normed).reshape(-1, width).sum(axis=0)
    grad_bias = grad.reshape(-1, width).sum(axis=0)
    grad_normed = grad * gain
    grad_x = inv_std * (
        grad_normed
        - grad_normed.mean(axis=-1, keepdims=True)
        - normed * (grad_normed * normed).mean(axis=-1, keepdims=True)
    )
    return grad_x, grad_gain, grad_bias


def _gelu(x):
    tanh = np.tanh(GELU_COEF * (x + GELU_CUBIC * x**3))
    return 0.5 * x * (1.0 + tanh), tanh


def _gelu_backward(grad, x, tanh):
    slope = 0.5 * (1.0 + tanh) + 0.5 * x * (1.0 - tanh**2) * GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x**2)
    return grad * slope


def _linear_backward(grad, x, weight):
    grad_weight = x.reshape(-1, x.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
    grad_bias = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
    return grad @ weight.T, grad_weight, grad_bias


def _softmax(x):
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _split_heads(x, heads):
    batch, length, width = x.shape
    return x.reshape(batch, length, heads, width // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    batch, heads, length, head_dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, length, heads * head_dim)


def sigmoid(x):
    """Logistic function without overflow"""
    return 0.5 * (1.0 + np.tanh(0.5 * x))


######################################################################
#  F O R W A R D
######################################################################
@dataclass
class _Cache:
    """Intermediates kept for the backward pass"""

    embed_ln: tuple = None
    hidden: np.ndarray = None
    layers: list = field(default_factory=list)


def _check_batch(params: ModelParams, batch: SequenceBatch) -> None:
    hyper = params.hyper
    # batches may be trimmed of trailing padding but never exceed the position table
    if batch.token_ids.ndim != 2 or not 1 <= batch.max_len <= hyper.max_len:
        raise DataValidationError(f"batch lanes have shape {batch.token_ids.shape}, expected (B, L) with L <= {hyper.max_len}")
    limits = {
        "token_ids": hyper.vocab_size,
        "age_ids": hyper.age_buckets,
        "year_ids": hyper.year_buckets,
        "segment_ids": 2,
        "position_ids": hyper.max_len,
        "attention_mask": 2,
    }
    for lane, limit in limits.items():
        values = getattr(batch, lane)
        if values.shape != batch.token_ids.shape:
            raise DataValidationError(f"lane '{lane}' has shape {values.shape}, expected {batch.token_ids.shape}")
        if values.size and (values.min() < 0 or values.max() >= limit):
            raise DataValidationError(f"lane '{lane}' holds ids outside [0, {limit})")


def _encode(params: ModelParams, batch: SequenceBatch, cache: _Cache) -> np.ndarray:
    """Runs embeddings and encoder blocks, returns the final hidden states (B, L, H)"""
    hyper = params.hyper
    summed = (
        params["embed.token"][batch.token_ids]
        + params["embed.age"][batch.age_ids]
        + params["embed.year"][batch.year_ids]
        + params["embed.segment"][batch.segment_ids]
        + params["embed.position"][batch.position_ids]
    )
    hidden, cache.embed_ln = _layer_norm(summed, params["embed.ln.gain"], params["embed.ln.bias"])
    key_bias = ((1 - batch.attention_mask) * MASK_PENALTY).astype(hidden.dtype)[:, None, None, :]
    scale = 1.0 / math.sqrt(hyper.head_dim)

    for layer in range(hyper.layers):
        p = f"layer{layer}."
        attn_in, ln1 = _layer_norm(hidden, params[p + "ln1.gain"], params[p + "ln1.bias"])
        query = _split_heads(attn_in @ params[p + "attn.query.weight"] + params[p + "attn.query.bias"], hyper.heads)
        key = _split_heads(attn_in @ params[p + "attn.key.weight"] + params[p + "attn.key.bias"], hyper.heads)
        value = _split_heads(attn_in @ params[p + "attn.value.weight"] + params[p + "attn.value.bias"], hyper.heads)
        probs = _softmax(query @ key.transpose(0, 1, 3, 2) * scale + key_bias)
        context = _merge_heads(probs @ value)
        hidden_mid = hidden + context @ params[p + "attn.output.weight"] + params[p + "attn.output.bias"]

        ffn_in, ln2 = _layer_norm(hidden_mid, params[p + "ln2.gain"], params[p + "ln2.bias"])
        pre_act = ffn_in @ params[p + "ffn.in.weight"] + params[p + "ffn.in.bias"]
        activated, tanh = _gelu(pre_act)
        hidden = hidden_mid + activated @ params[p + "ffn.out.weight"] + params[p + "ffn.out.bias"]
        cache.layers.append(
            {
                "attn_in": attn_in,
                "ln1": ln1,
                "query": query,
                "key": key,
                "value": value,
                "probs": probs,
                "context": context,
                "ffn_in": ffn_in,
                "ln2": ln2,
                "pre_act": pre_act,
                "tanh": tanh,
                "activated": activated,
            }
        )
    cache.hidden = hidden
    return hidden


def _head_logits(params: ModelParams, hidden: np.ndarray, head: Task) -> np.ndarray:
    if head == Task.MLM:
        return hidden @ params["mlm.weight"] + params["mlm.bias"]
    return hidden[:, 0, :] @ params["next_visit.weight"] + params["next_visit.bias"]


def forward(params: ModelParams, batch: SequenceBatch, head: Task) -> np.ndarray:
    """Logits of a batch: (B, L, V) for MLM, (B, G) for NEXT_VISIT"""
    _check_batch(params, batch)
    hidden = _encode(params, batch, _Cache())
    return _head_logits(params, hidden, Task(head))


######################################################################
#  L O S S E S
######################################################################
def _as_targets(mask_targets) -> np.ndarray:
    targets = np.asarray(mask_targets, dtype=np.int64).reshape(-1, 3)
    if targets.shape[0] == 0:
        raise DataValidationError("empty MLM batch")
    return targets


def mlm_loss(logits: np.ndarray, mask_targets) -> float:
    """Mean cross-entropy over the masked (sequence, position, token) targets"""
    targets = _as_targets(mask_targets)
    rows = logits[targets[:, 0], targets[:, 1]]
    log_probs = _log_softmax(rows)
    return float(-log_probs[np.arange(len(targets)), targets[:, 2]].mean())


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise DataValidationError(f"labels have shape {labels.shape}, logits {logits.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise DataValidationError("labels must be 0 or 1")
    return labels.astype(logits.dtype)


def nextvisit_loss(logits: np.ndarray, labels) -> float:
    """Mean binary cross-entropy of sigmoid(logits), in the stable log-sum form"""
    labels = _check_labels(logits, labels)
    losses = np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    return float(losses.mean())


######################################################################
#  B A C K W A R D
######################################################################
def backward(params: ModelParams, batch: SequenceBatch, head: Task, targets) -> tuple[float, ParamGradients]:
    """Loss and gradients with respect to every named tensor

    targets are the (N, 3) mask targets for MLM or the (B, G) multi-hot
    labels for NEXT_VISIT. The head that is not used gets zero gradients.
    """
    head = Task(head)
    _check_batch(params, batch)
    hyper = params.hyper
    cache = _Cache()
    hidden = _encode(params, batch, cache)
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    grad_hidden = np.zeros_like(hidden)

    if head == Task.MLM:
        mask_targets = _as_targets(targets)
        rows = hidden[mask_targets[:, 0], mask_targets[:, 1]]
        logits = rows @ params["mlm.weight"] + params["mlm.bias"]
        log_probs = _log_softmax(logits)
        count = len(mask_targets)
        loss = float(-log_probs[np.arange(count), mask_targets[:, 2]].mean())
        grad_logits = np.exp(log_probs)
        grad_logits[np.arange(count), mask_targets[:, 2]] -= 1.0
        grad_logits /= count
        grads["mlm.weight"] = rows.T @ grad_logits
        grads["mlm.bias"] = grad_logits.sum(axis=0)
        np.add.at(grad_hidden, (mask_targets[:, 0], mask_targets[:, 1]), grad_logits @ params["mlm.weight"].T)
    else:
        pooled = hidden[:, 0, :]
        logits = pooled @ params["next_visit.weight"] + params["next_visit.bias"]
        labels = _check_labels(logits, targets)
        loss = nextvisit_loss(logits, labels)
        grad_logits = (sigmoid(logits) - labels) / labels.size
        grads["next_visit.weight"] = pooled.T @ grad_logits
        grads["next_visit.bias"] = grad_logits.sum(axis=0)
        grad_hidden[:, 0, :] = grad_logits @ params["next_visit.weight"].T

    scale = 1.0 / math.sqrt(hyper.head_dim)
    for layer in reversed(range(hyper.layers)):
        p = f"layer{layer}."
        c = cache.layers[layer]

        # feed-forward sub-block
        grad_act, grads[p + "ffn.out.weight"], grads[p + "ffn.out.bias"] = _linear_backward(
            grad_hidden, c["activated"], params[p + "ffn.out.weight"]
        )
        grad_pre = _gelu_backward(grad_act, c["pre_act"], c["tanh"])
        grad_ffn_in, grads[p + "ffn.in.weight"], grads[p + "ffn.in.bias"] = _linear_backward(
            grad_pre, c["ffn_in"], params[p + "ffn.in.weight"]
        )
        grad_mid, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = _layer_norm_backward(
            grad_ffn_in, params[p + "ln2.gain"], c["ln2"]
        )
        grad_mid = grad_mid + grad_hidden

        # attention sub-block
        grad_context, grads[p + "attn.output.weight"], grads[p + "attn.output.bias"] = _linear_backward(
            grad_mid, c["context"], params[p + "attn.output.weight"]
        )
        grad_context = _split_heads(grad_context, hyper.heads)
        probs = c["probs"]
        grad_probs = grad_context @ c["value"].transpose(0, 1, 3, 2)
        grad_value = probs.transpose(0, 1, 3, 2) @ grad_context
        grad_scores = probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))
        grad_query = grad_scores @ c["key"] * scale
        grad_key = grad_scores.transpose(0, 1, 3, 2) @ c["query"] * scale

        grad_attn_in = np.zeros_like(c["attn_in"])
        for proj, grad_proj in (("query", grad_query), ("key", grad_key), ("value", grad_value)):
            grad_in, grads[f"{p}attn.{proj}.weight"], grads[f"{p}attn.{proj}.bias"] = _linear_backward(
                _merge_heads(grad_proj), c["attn_in"], params[f"{p}attn.{proj}.weight"]
            )
            grad_attn_in += grad_in
        grad_prev, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = _layer_norm_backward(
            grad_attn_in, params[p + "ln1.gain"], c["ln1"]
        )
        grad_hidden = grad_prev + grad_mid

    grad_summed, grads["embed.ln.gain"], grads["embed.ln.bias"] = _layer_norm_backward(
        grad_hidden, params["embed.ln.gain"], cache.embed_ln
    )
    flat = grad_summed.reshape(-1, hyper.hidden)
    for name, lane in (
        ("embed.token", batch.token_ids),
        ("embed.age", batch.age_ids),
        ("embed.year", batch.year_ids),
        ("embed.segment", batch.segment_ids),
        ("embed.position", batch.position_ids),
    ):
        np.add.at(grads[name], lane.ravel(), flat)

    grads = {name: value.astype(params[name].dtype, copy=False) for name, value in grads.items()}
    return loss, ParamGradients(hyper, grads)
