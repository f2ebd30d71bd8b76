"""Self-supervised objectives: InfoNCE (MoCo), BYOL, DPC and VAE.

All losses are differentiable torch functions returning scalars. Softmax
terms go through ``torch.logsumexp`` (max-subtracted), which matters at
temperature 0.1 where logits reach +-10.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, DegenerateInputError

DEFAULT_TEMPERATURE = 0.1


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if not torch.isfinite(x).all():
        raise DegenerateInputError(f"{what} contains non-finite values")
    if (norms == 0).any():
        raise DegenerateInputError(f"{what} contains a zero-norm embedding")
    return x / norms


@dataclass
class ContrastiveBatch:
    """Queries against a shared key pool; masks pick each query's positives and negatives."""

    queries: torch.Tensor
    keys: torch.Tensor
    positive_mask: torch.Tensor
    negative_mask: torch.Tensor
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        n, d = self.queries.shape
        m, dk = self.keys.shape
        if d != dk:
            raise ContractError(f"query dim {d} != key dim {dk}")
        if self.positive_mask.shape != (n, m) or self.negative_mask.shape != (n, m):
            raise ContractError("masks must have shape (queries, keys)")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if (self.positive_mask & self.negative_mask).any():
            raise ContractError("a key cannot be both positive and negative for one query")
        if not self.positive_mask.any(dim=1).all() or not self.negative_mask.any(dim=1).all():
            raise ContractError("every query needs at least one positive and one negative key")


def info_nce(batch: ContrastiveBatch) -> torch.Tensor:
    q = _unit(batch.queries, "queries")
    k = _unit(batch.keys, "keys")
    logits = q @ k.T / batch.temperature
    neg_inf = float("-inf")
    pos = logits.masked_fill(~batch.positive_mask, neg_inf).logsumexp(dim=1)
    everything = logits.masked_fill(~(batch.positive_mask | batch.negative_mask), neg_inf).logsumexp(dim=1)
    return (everything - pos).mean()


def info_nce_sets(queries, positives, negatives, temperature=DEFAULT_TEMPERATURE) -> torch.Tensor:
    """InfoNCE with explicit per-query key sets.

    ``positives`` is (N, P, D); ``negatives`` is (N, K, D) or a shared (K, D).
    """
    q = _unit(queries, "queries")
    p = _unit(positives, "positives")
    n = _unit(negatives, "negatives")
    if p.dim() != 3 or p.shape[0] != q.shape[0]:
        raise ContractError("positives must be (N, P, D)")
    lp = torch.einsum("nd,npd->np", q, p) / temperature
    ln = (q @ n.T if n.dim() == 2 else torch.einsum("nd,nkd->nk", q, n)) / temperature
    return (torch.cat([lp, ln], dim=1).logsumexp(dim=1) - lp.logsumexp(dim=1)).mean()


def temporal_persistency_pairs(video_ids, online: torch.Tensor, target: torch.Tensor,
                               queue: torch.Tensor | None = None,
                               temperature: float = DEFAULT_TEMPERATURE,
                               queue_ids=None) -> ContrastiveBatch:
    """Contrastive batch where clips of one video are positives for each other.

    ``online`` / ``target`` are (V, C, D): C clips from each of V videos. Every
    online clip queries the pool of target clips plus the optional queue; its
    own clip index is left out, the other clips of its video are positives and
    everything else is negative. With ``queue_ids`` (one video id per queued
    key) queued keys from the query's own video are left out as well, since on
    a small corpus they would otherwise be negatives from the same video.
    """
    ids = list(video_ids)
    if len(ids) != len(set(ids)):
        raise ContractError("the same video appears twice in the batch")
    if len(ids) < 2:
        raise ContractError("temporal persistency needs at least two videos for negatives")
    v, c, d = online.shape
    if target.shape != online.shape or v != len(ids):
        raise ContractError("online/target must both be (videos, clips, dim)")
    if c < 2:
        raise ContractError("need at least two clips per video")
    video = torch.arange(v).repeat_interleave(c)
    same = video[:, None] == video[None, :]
    pos = same & ~torch.eye(v * c, dtype=torch.bool)
    neg = ~same
    keys = target.reshape(v * c, d)
    if queue is not None and len(queue):
        keys = torch.cat([keys, queue], dim=0)
        extra = torch.ones(v * c, len(queue), dtype=torch.bool)
        if queue_ids is not None:
            if len(queue_ids) != len(queue):
                raise ContractError("queue_ids must name the video of every queued key")
            query_ids = [vid for vid in ids for _ in range(c)]
            extra = torch.tensor([[qid != kid for kid in queue_ids] for qid in query_ids],
                                 dtype=torch.bool).reshape(v * c, len(queue))
        pos = torch.cat([pos, torch.zeros_like(extra)], dim=1)
        neg = torch.cat([neg, extra], dim=1)
    return ContrastiveBatch(online.reshape(v * c, d), keys, pos, neg, temperature)


def byol_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over rows of ||unit(prediction) - unit(target)||^2; no gradient into target."""
    if prediction.shape != target.shape:
        raise ContractError(f"shape mismatch {tuple(prediction.shape)} vs {tuple(target.shape)}")
    p = _unit(prediction, "prediction")
    t = _unit(target.detach(), "target")
    return ((p - t) ** 2).sum(dim=1).mean()


def gaussian_kl_standard(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over latents, averaged over the batch."""
    return 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).sum(dim=1).mean()


def vae_loss(x, x_hat, mu, logvar, kl_weight: float = 1.0):
    """Returns ``(total, reconstruction, kl)``; reconstruction is per-pixel MSE."""
    if x.shape != x_hat.shape:
        raise ContractError(f"reconstruction shape {tuple(x_hat.shape)} != input {tuple(x.shape)}")
    if not torch.isfinite(logvar).all() or not torch.isfinite(mu).all():
        raise DegenerateInputError("latent mean / log-variance must be finite")
    recon = F.mse_loss(x_hat, x)
    kl = gaussian_kl_standard(mu, logvar)
    return recon + kl_weight * kl, recon, kl


class DpcHead(nn.Module):
    """Recurrent aggregator plus future predictor, applied per spatial cell."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.gru = nn.GRUCell(channels, hidden)
        self.predictor = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.hidden = hidden

    def forward(self, context: torch.Tensor, horizon: int) -> torch.Tensor:
        """(N, Bc, C, H, W) context features -> (N, horizon, C, H, W) predictions."""
        n, bc, c, h, w = context.shape
        cells = context.permute(0, 1, 3, 4, 2).reshape(n, bc, h * w, c)
        state = context.new_zeros(n * h * w, self.hidden)
        for b in range(bc):
            state = self.gru(cells[:, b].reshape(-1, c), state)
        preds = []
        for _ in range(horizon):
            z = self.predictor(state)
            preds.append(z)
            state = self.gru(z, state)
        out = torch.stack(preds, dim=0).reshape(horizon, n, h, w, c)
        return out.permute(1, 0, 4, 2, 3)


def dpc_score(predicted: torch.Tensor, actual: torch.Tensor,
              temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """InfoNCE over all future cells of the batch.

    Each predicted cell's positive is the actual cell at the same (sample,
    step, row, column); every other actual cell is a negative.
    """
    if predicted.shape != actual.shape:
        raise ContractError("predicted and actual future features differ in shape")
    c = predicted.shape[2]
    p = F.normalize(predicted.permute(0, 1, 3, 4, 2).reshape(-1, c), dim=1, eps=1e-8)
    a = F.normalize(actual.permute(0, 1, 3, 4, 2).reshape(-1, c), dim=1, eps=1e-8)
    logits = p @ a.T / temperature
    return F.cross_entropy(logits, torch.arange(len(logits)))


def dpc_loss(blocks: torch.Tensor, encoder, head: DpcHead, context_blocks: int,
             temperature: float = DEFAULT_TEMPERATURE, return_features: bool = False):
    """``blocks`` is (N, B, T, 3, H, W): B consecutive sub-clips of each sample.

    With ``return_features`` the (N, B, C, H', W') block features come back too.
    """
    n, b = blocks.shape[:2]
    horizon = b - context_blocks
    if context_blocks < 1 or horizon < 1:
        raise ContractError(f"need >= 1 context and >= 1 future block, got {b} blocks "
                            f"with context {context_blocks}")
    fmap = encoder.encode(blocks.reshape((n * b,) + tuple(blocks.shape[2:])))
    feats = fmap.mean(dim=2)
    feats = feats.reshape((n, b) + tuple(feats.shape[1:]))
    preds = head(feats[:, :context_blocks], horizon)
    loss = dpc_score(preds, feats[:, context_blocks:], temperature)
    return (loss, feats) if return_features else loss
