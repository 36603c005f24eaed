"""Training objectives: speaker-identification cross-entropy, feature
enhancement MSE on the decoded spectrograms, and the angular prototypical
loss that pulls clean/noisy embedding pairs together.

Totals are plain unweighted sums per mode (optional weights exist for
experimentation and default to 1).
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossBundle:
    cce: float = 0.0
    mse: float = 0.0
    apn: float = 0.0
    total: float = 0.0


def cce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy over all items (log-softmax is
    max-stabilized internally)."""
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    return F.cross_entropy(logits, labels)


def mse_fe_loss(
    enhanced_clean: torch.Tensor,
    enhanced_noisy: torch.Tensor,
    target_clean1: torch.Tensor,
    target_clean2: torch.Tensor,
    literal: bool = False,
) -> torch.Tensor:
    """Reconstruction error of both decoder outputs against their clean
    spectrograms (the clean input maps to itself).

    Default normalization is per element, so the magnitude does not grow with
    the spectrogram size; `literal=True` instead divides the summed squared
    norms by 2n only.
    """
    for t in (enhanced_noisy, target_clean1, target_clean2):
        if t.shape != enhanced_clean.shape:
            raise ValueError("all four tensors must share one shape")
    if literal:
        n = enhanced_clean.shape[0]
        total = ((enhanced_clean - target_clean1) ** 2).sum() + (
            (enhanced_noisy - target_clean2) ** 2
        ).sum()
        return total / (2 * n)
    return 0.5 * (
        F.mse_loss(enhanced_clean, target_clean1)
        + F.mse_loss(enhanced_noisy, target_clean2)
    )


def apn_similarity(
    emb_clean: torch.Tensor, emb_noisy: torch.Tensor, w, b
) -> torch.Tensor:
    """Scaled-and-shifted cosine similarity matrix; rows index clean
    embeddings, columns noisy ones."""
    if emb_clean.shape != emb_noisy.shape:
        raise ValueError("embedding batches must match")
    c = F.normalize(emb_clean, dim=1, eps=1e-8)
    n = F.normalize(emb_noisy, dim=1, eps=1e-8)
    return w * (c @ n.t()) + b


def apn_loss(sim: torch.Tensor) -> torch.Tensor:
    """Softmax over each column with the diagonal as the positive, averaged."""
    if sim.dim() != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError("similarity matrix must be square")
    n = sim.shape[0]
    targets = torch.arange(n, device=sim.device)
    # column j's logits over clean indices i; cross_entropy wants [N, C]
    return F.cross_entropy(sim.t(), targets)


def total_loss(mode: str, cce=None, mse=None, apn=None, weights=(1.0, 1.0, 1.0)):
    """Combine per-mode parts into (total tensor, LossBundle of floats)."""
    if mode == "baseline":
        needed = {"cce": cce}
    elif mode == "unet":
        needed = {"cce": cce, "mse": mse}
    elif mode == "exunet":
        needed = {"cce": cce, "mse": mse, "apn": apn}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    for name, part in needed.items():
        if part is None:
            raise ValueError(f"mode {mode!r} requires the {name} part")
    w_cce, w_mse, w_apn = weights
    total = w_cce * needed["cce"]
    if "mse" in needed:
        total = total + w_mse * needed["mse"]
    if "apn" in needed:
        total = total + w_apn * needed["apn"]

    def scalar(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    bundle = LossBundle(
        cce=scalar(needed["cce"]),
        mse=scalar(needed["mse"]) if "mse" in needed else 0.0,
        apn=scalar(needed["apn"]) if "apn" in needed else 0.0,
        total=scalar(total),
    )
    return total, bundle
