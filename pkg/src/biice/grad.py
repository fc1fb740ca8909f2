"""Hand-derived reverse pass for the batched Bi-ICE loss.

``loss_and_grad`` evaluates the mean minibatch objective and returns exact
gradients for every tensor in :meth:`BiIceParams.named_tensors`. Gradients
flow through every binding/refinement round back to the persistent bank.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ATTN_FLOOR, BiIceConfig, BiIceParams, forward, split_composition
from .numerics import TrainingError, softmax, softmax_backward
from .objectives import LossWeights, cross_entropy, explanation_loss, sparsity_entropy, total_loss


@dataclass
class LossBreakdown:
    total: float
    cls: float
    expl: float | None
    sparse: float
    correct: int


def _t(x):
    return np.swapaxes(x, -1, -2)


def _wsum(a, b):
    """Sum over the batch of ``a[b]^T @ b[b]`` for stacked row matrices."""
    return np.einsum("bij,bik->jk", a, b)


def batch_loss(params: BiIceParams, config: BiIceConfig, z, labels, weights: LossWeights,
               q_global=None, q_spatial=None):
    """Forward a minibatch and evaluate all loss terms (no gradients)."""
    trace = forward(z, params, config)
    return _losses(trace, config, labels, weights, q_global, q_spatial), trace


def _losses(trace, config, labels, weights, q_global, q_spatial) -> LossBreakdown:
    cls = cross_entropy(trace.logits, labels)
    sparse = sparsity_entropy(trace.phi)
    expl = None
    if weights.lambda_expl > 0:
        g, s = split_composition(trace.phi, config.n_global)
        expl = explanation_loss(g, s, q_global, q_spatial)
    total = total_loss(cls, expl, sparse, weights)
    correct = int((trace.logits.argmax(axis=-1) == np.asarray(labels)).sum())
    return LossBreakdown(total, cls, expl, sparse, correct)


def loss_and_grad(params: BiIceParams, config: BiIceConfig, z, labels, weights: LossWeights,
                  q_global=None, q_spatial=None):
    """Return ``(LossBreakdown, grads)`` for the batch mean of the total loss.

    Args:
        z: embeddings of shape ``(B, L, D)``.
        labels: integer class ids of shape ``(B,)``.
        q_global, q_spatial: annotation blocks, required when ``lambda_expl > 0``.
    """
    z = np.asarray(z)
    labels = np.asarray(labels)
    b, n_patches, _ = z.shape
    trace = forward(z, params, config)
    losses = _losses(trace, config, labels, weights, q_global, q_spatial)
    if not np.isfinite(losses.total):
        norms = {k: float(np.linalg.norm(v)) for k, v in params.named_tensors().items()}
        raise TrainingError(f"non-finite loss {losses.total}; parameter norms {norms}")

    scale = config.scale
    cell = params.cell
    grads = {k: np.zeros_like(v) for k, v in params.named_tensors().items()}

    # classification head
    probs = softmax(trace.logits, axis=-1)
    dlogits = probs
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    pooled = trace.z_bar.mean(axis=1)
    grads["head"] = pooled.T @ dlogits
    dz_bar = np.broadcast_to((dlogits @ params.head.T)[:, None, :] / n_patches, trace.z_bar.shape)

    # broadcast: z_bar = phi @ (zeta_T @ v_omega)
    zeta_t = trace.zeta_refined
    phi = trace.phi
    v_o = zeta_t @ params.v_omega
    dphi = dz_bar @ _t(v_o)
    dv_o = _t(phi) @ dz_bar

    if weights.lambda_expl > 0:
        g, s = split_composition(phi, config.n_global)
        kg = config.n_global
        dphi[..., :kg] += weights.lambda_expl * 2.0 * (g - q_global)[:, None, :] / (n_patches * b)
        dphi[..., kg:] += weights.lambda_expl * 2.0 * (s - q_spatial) / b
    if weights.lambda_sparse > 0:
        safe = np.where(phi > 0, phi, 1.0)
        dent = np.where(phi > 0, -(np.log(safe) + 1.0), 0.0)
        dphi += weights.lambda_sparse * dent / (phi.shape[-1] * phi.shape[-2] * b)

    axis = -1 if config.norm_axis == "concepts" else -2
    dscores = softmax_backward(phi, dphi, axis) / scale
    q_o = z @ params.q_omega
    k_o = zeta_t @ params.k_omega
    dq_o = dscores @ k_o
    dk_o = _t(dscores) @ q_o
    grads["q_omega"] = _wsum(z, dq_o)
    grads["k_omega"] = _wsum(zeta_t, dk_o)
    grads["v_omega"] = _wsum(zeta_t, dv_o)
    dzeta = dk_o @ params.k_omega.T + dv_o @ params.v_omega.T

    # binding + refinement rounds, newest first
    v_in = z @ params.v_theta
    k_in = z @ params.k_theta
    for zeta_in, competitive, attn, u, gz, gr, h_tilde in reversed(trace.steps):
        h = np.broadcast_to(zeta_in, dzeta.shape)
        d_gz = dzeta * (h_tilde - h)
        d_ht = dzeta * gz
        dh = dzeta * (1.0 - gz)

        da_h = d_ht * (1.0 - h_tilde ** 2)
        rh = gr * h
        grads["cell.W_h"] += _wsum(u, da_h)
        grads["cell.U_h"] += _wsum(rh, da_h)
        grads["cell.b_h"] += da_h.sum(axis=(0, 1))
        du = da_h @ cell.W_h.T
        d_rh = da_h @ cell.U_h.T
        dh = dh + d_rh * gr
        d_gr = d_rh * h

        da_r = d_gr * gr * (1.0 - gr)
        grads["cell.W_r"] += _wsum(u, da_r)
        grads["cell.U_r"] += _wsum(h, da_r)
        grads["cell.b_r"] += da_r.sum(axis=(0, 1))
        du += da_r @ cell.W_r.T
        dh += da_r @ cell.U_r.T

        da_z = d_gz * gz * (1.0 - gz)
        grads["cell.W_z"] += _wsum(u, da_z)
        grads["cell.U_z"] += _wsum(h, da_z)
        grads["cell.b_z"] += da_z.sum(axis=(0, 1))
        du += da_z @ cell.W_z.T
        dh += da_z @ cell.U_z.T

        # readout u = attn @ v_in; attn = competitive / row mass
        dattn = du @ _t(v_in)
        grads["v_theta"] += _wsum(z, _t(attn) @ du)
        mass = np.maximum(competitive.sum(axis=-1, keepdims=True), ATTN_FLOOR)
        dcomp = (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) / mass
        dscores = softmax_backward(competitive, dcomp, axis=-2) / scale
        q_in = h @ params.q_theta
        dq = dscores @ k_in
        dk = _t(dscores) @ q_in
        grads["q_theta"] += _wsum(h, dq)
        grads["k_theta"] += _wsum(z, dk)
        dzeta = dh + dq @ params.q_theta.T

    grads["zeta"] = dzeta.sum(axis=0)
    return losses, grads
