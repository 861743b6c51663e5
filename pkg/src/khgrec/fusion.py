"""Channel-attention fusion, DropEdge augmentation, contrastive and ranking losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class LossBreakdown:
    cf: float
    kg: float
    ssl_user: float
    ssl_item: float
    reg: float
    total: float

    def as_dict(self):
        return dict(
            cf=self.cf, kg=self.kg, ssl_user=self.ssl_user, ssl_item=self.ssl_item, reg=self.reg, total=self.total
        )


def channel_weights(channels, W, b, q):
    """Per-channel score ``mean_i q^T tanh(W m_i + b)``, stacked into a 1-D tensor."""
    scores = []
    for M in channels:
        act = ad.tanh(M @ ad.transpose(W) + b)
        scores.append(ad.reshape(ad.mean(act @ ad.reshape(q, (-1, 1))), (1,)))
    return ad.concat(scores)


def channel_fusion(M_cf, M_ckg, params, fixed_beta=None):
    """Attention-weighted sum of the collaborative and knowledge item channels.

    Returns ``(fused, beta)`` where ``beta`` holds the two channel weights.
    ``fixed_beta`` bypasses the attention (used by the no-attention ablation).
    """
    if M_cf.shape != M_ckg.shape:
        raise ad.ShapeError("channel_fusion", M_cf.shape, M_ckg.shape)
    if fixed_beta is not None:
        beta = ad.Tensor(np.asarray(fixed_beta, dtype=np.float64))
    else:
        beta = ad.softmax(channel_weights([M_cf, M_ckg], params["W"], params["b"], params["q"]))
    fused = M_cf * ad.gather(beta, [0]) + M_ckg * ad.gather(beta, [1])
    return fused, beta


def drop_edge(nnz, p, seed):
    """Boolean keep-mask over ``nnz`` incidence entries, each dropped with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    return rng.random(nnz) >= p


def drop_edge_matrix(A, p, seed):
    """``Z_A ∘ A`` for a scipy sparse matrix: explicit nonzeros zeroed with probability ``p``."""
    A = A.tocoo()
    keep = drop_edge(A.nnz, p, seed)
    out = A.copy()
    out.data = np.where(keep, A.data, 0.0)
    out.eliminate_zeros()
    return out.tocsr()


def cosine_matrix(Z, G):
    return ad.row_normalize(Z) @ ad.transpose(ad.row_normalize(G))


def infonce(Z_layers, G_layers, tau, reduction="sum"):
    """Cross-view InfoNCE over matching rows of paired layer views.

    Row ``i`` of ``Z_layers[l]`` is the positive for row ``i`` of ``G_layers[l]``;
    every other row of ``G_layers[l]`` is a negative. Summed over layers; over
    rows it is summed or averaged per ``reduction``.
    """
    if len(Z_layers) != len(G_layers):
        raise ValueError(f"layer count mismatch: {len(Z_layers)} vs {len(G_layers)}")
    total = None
    for Z, G in zip(Z_layers, G_layers):
        if Z.shape != G.shape:
            raise ad.ShapeError("infonce", Z.shape, G.shape)
        logp = ad.log_softmax(cosine_matrix(Z, G) * (1.0 / tau))
        eye = np.eye(Z.shape[0])
        term = ad.neg(ad.sum(logp * eye))
        if reduction == "mean":
            term = term * (1.0 / Z.shape[0])
        total = term if total is None else total + term
    return total


def predict(e_u, e_i):
    return e_u @ ad.transpose(e_i) if e_u.ndim == 2 else ad.sum(e_u * e_i)


def pair_scores(M_u, M_i, users, items):
    return ad.sum(ad.gather(M_u, users) * ad.gather(M_i, items), axis=1)


def bpr_loss(pos_scores, neg_scores, reduction="sum"):
    """``-ln sigmoid(y_pos - y_neg)`` over (user, positive, negative) triples."""
    terms = ad.neg(ad.log_sigmoid(pos_scores - neg_scores))
    return ad.sum(terms) if reduction == "sum" else ad.mean(terms)


def total_loss(cf, kg, ssl_user, ssl_item, reg, lambda1, lambda2):
    """Combine already-computed loss values into a :class:`LossBreakdown`.

    ``reg`` is the squared Frobenius norm of all parameters; it enters the
    optimiser through weight decay, so here it is only reported.
    """
    parts = dict(cf=cf, kg=kg, ssl_user=ssl_user, ssl_item=ssl_item, reg=reg)
    for name, value in parts.items():
        if not np.isfinite(value):
            raise FloatingPointError(f"loss term {name!r} is not finite ({value})")
    total = cf + kg + lambda2 * (ssl_user + ssl_item) + lambda1 * reg
    return LossBreakdown(float(cf), float(kg), float(ssl_user), float(ssl_item), float(reg), float(total))
