"""Network building blocks and the three systems: baseline, unet, exunet.

Feature maps are [batch, channels, frequency bins, frames]. The encoder stem
halves frequency only; stages 2 and 3 halve both axes, so inputs need the
frame count divisible by 4 (and 64 frequency bins divisible by 8). The
decoder mirrors the encoder stages with reversed channel counts and restores
the input shape exactly; the extractor is encoder-shaped with a concatenation
(plus 1x1 fuse) ahead of each stage.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Waveform
from .frontend import DEFAULT_FRONTEND, FrontendConfig, log_mel

MODES = ("baseline", "unet", "exunet")

# (blocks, stride) per residual stage EB1..EB4
STAGE_BLOCKS = (3, 4, 6, 3)
STAGE_STRIDES = (1, 2, 2, 1)

# Width multiplier of the lightweight exunet variant, calibrated so its
# learnable-parameter count (1,388,895 at the default widths and a 20-speaker
# classifier head) matches the full-width baseline's ~1.4M budget.
EXUNET_L_WIDTH_SCALE = 0.58


@dataclass
class ModelConfig:
    mode: str = "baseline"
    widths: tuple = (16, 16, 32, 64, 128)  # stem + EB1..EB4
    se_reduction: int = 8
    asp_hidden: int = 128
    emb_dim: int = 256
    n_speakers: int = 20
    width_scale: float = 1.0
    # flatten channel x frequency into the pooling feature axis instead of
    # averaging over frequency first (much larger head; off by default to
    # keep the baseline near its parameter budget)
    asp_flatten_freq: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.widths) != 5:
            raise ValueError("widths must list 5 stage widths (stem + 4 stages)")
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")

    @property
    def scaled_widths(self) -> tuple:
        if self.width_scale == 1.0:
            return tuple(self.widths)
        return tuple(max(1, round(w * self.width_scale)) for w in self.widths)


@dataclass
class ForwardOutputs:
    embeddings: torch.Tensor  # [B, emb_dim]
    logits: torch.Tensor  # [B, n_speakers]
    enhanced: torch.Tensor | None = None  # [B, 1, F, T] for unet/exunet


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gating."""

    def __init__(self, channels, reduction=8):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None]


class SEBasicBlock(nn.Module):
    """Two 3x3 convs + SE with a (projected) residual shortcut."""

    def __init__(self, in_ch, out_ch, stride=1, reduction=8):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.se = SEBlock(out_ch, reduction)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.se(self.bn2(self.conv2(out)))
        return F.relu(out + self.shortcut(x))


def _stage(in_ch, out_ch, n_blocks, stride, reduction):
    blocks = [SEBasicBlock(in_ch, out_ch, stride, reduction)]
    blocks += [SEBasicBlock(out_ch, out_ch, 1, reduction) for _ in range(n_blocks - 1)]
    return nn.Sequential(*blocks)


def _mirrored_stage(in_ch, out_ch, n_blocks, reduction):
    """Encoder stage with the block list reversed and each block's channel
    counts swapped; all strides 1 (upsampling lives in the transposed convs)."""
    blocks = [SEBasicBlock(out_ch, out_ch, 1, reduction) for _ in range(n_blocks - 1)]
    blocks.append(SEBasicBlock(out_ch, in_ch, 1, reduction))
    return nn.Sequential(*blocks)


def _conv_bn_relu(in_ch, out_ch, kernel=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def _tconv_bn_relu(in_ch, out_ch, kernel=2, stride=2):
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, kernel, stride=stride, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Stem conv (7x7, stride 2x1) + four SE-residual stages; returns the
    final latent map and the four stage outputs as skip connections."""

    def __init__(self, widths, reduction=8):
        super().__init__()
        w = list(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(1, w[0], 7, stride=(2, 1), padding=3, bias=False),
            nn.BatchNorm2d(w[0]),
            nn.ReLU(inplace=True),
        )
        self.stages = nn.ModuleList(
            _stage(w[k], w[k + 1], STAGE_BLOCKS[k], STAGE_STRIDES[k], reduction)
            for k in range(4)
        )

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected [B, 1, F, T] input, got {tuple(x.shape)}")
        if x.shape[3] % 4 != 0:
            raise ValueError(f"frame count {x.shape[3]} not divisible by 4")
        if x.shape[2] % 8 != 0:
            raise ValueError(f"frequency bins {x.shape[2]} not divisible by 8")
        out = self.stem(x)
        skips = []
        for stage in self.stages:
            out = stage(out)
            skips.append(out)
        return out, skips


class Decoder(nn.Module):
    """Four decoder blocks (concat skip, 1x1 fuse, mirrored stage, then a 1x1
    conv or a 2x upsampling transposed conv) and a final frequency-doubling
    transposed conv projecting to one channel."""

    def __init__(self, widths, reduction=8):
        super().__init__()
        w = list(widths)
        self.fuses = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.tails = nn.ModuleList()
        for i, k in enumerate(reversed(range(4))):  # mirror EB4, EB3, EB2, EB1
            self.fuses.append(_conv_bn_relu(2 * w[k + 1], w[k + 1]))
            self.stages.append(
                _mirrored_stage(w[k], w[k + 1], STAGE_BLOCKS[k], reduction)
            )
            if i in (1, 2):  # undo the stride-2 stages
                self.tails.append(_tconv_bn_relu(w[k], w[k]))
            else:
                self.tails.append(_conv_bn_relu(w[k], w[k]))
        self.out = nn.ConvTranspose2d(w[0], 1, (2, 1), stride=(2, 1))

    def forward(self, latent, skips):
        if len(skips) != 4:
            raise ValueError("expected 4 encoder skips")
        x = latent
        feats = []
        for fuse, stage, tail, skip in zip(
            self.fuses, self.stages, self.tails, reversed(skips)
        ):
            if x.shape[2:] != skip.shape[2:]:
                raise ValueError(
                    f"skip shape {tuple(skip.shape)} does not match {tuple(x.shape)}"
                )
            x = tail(stage(fuse(torch.cat([x, skip], dim=1))))
            feats.append(x)
        return self.out(x), feats


class Extractor(nn.Module):
    """Encoder-shaped network over the enhanced spectrogram, with the matching
    decoder intermediate concatenated (and 1x1-fused) ahead of each stage."""

    def __init__(self, widths, reduction=8):
        super().__init__()
        w = list(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(1, w[0], 7, stride=(2, 1), padding=3, bias=False),
            nn.BatchNorm2d(w[0]),
            nn.ReLU(inplace=True),
        )
        self.fuses = nn.ModuleList(
            _conv_bn_relu(2 * w[k], w[k]) for k in range(4)
        )
        self.stages = nn.ModuleList(
            _stage(w[k], w[k + 1], STAGE_BLOCKS[k], STAGE_STRIDES[k], reduction)
            for k in range(4)
        )

    def forward(self, enhanced, decoder_feats):
        if len(decoder_feats) != 4:
            raise ValueError("expected 4 decoder intermediates")
        x = self.stem(enhanced)
        for fuse, stage, feat in zip(self.fuses, self.stages, reversed(decoder_feats)):
            if x.shape[2:] != feat.shape[2:]:
                raise ValueError(
                    f"decoder feat shape {tuple(feat.shape)} does not match "
                    f"{tuple(x.shape)}"
                )
            x = stage(fuse(torch.cat([x, feat], dim=1)))
        return x


class AttentiveStatsPool(nn.Module):
    """Scalar frame attention; pools to concat(weighted mean, weighted std)."""

    def __init__(self, n_feats, hidden=128):
        super().__init__()
        self.att = nn.Linear(n_feats, hidden)
        self.score = nn.Linear(hidden, 1)

    def weights(self, feats):
        # feats: [B, D, T] -> [B, T], softmax over frames
        scores = self.score(torch.tanh(self.att(feats.transpose(1, 2)))).squeeze(-1)
        return torch.softmax(scores, dim=1)

    def forward(self, feats):
        w = self.weights(feats)[:, None, :]
        mean = (w * feats).sum(dim=2)
        var = (w * feats**2).sum(dim=2) - mean**2
        std = torch.sqrt(torch.clamp(var, min=1e-8))
        return torch.cat([mean, std], dim=1)


class EmbeddingHead(nn.Module):
    """The g(.) map: attentive statistics pooling plus a linear layer to the
    embedding space (no activation afterwards)."""

    def __init__(self, channels, emb_dim=256, asp_hidden=128, flatten_freq=False,
                 freq_bins=8):
        super().__init__()
        self.flatten_freq = flatten_freq
        n_feats = channels * freq_bins if flatten_freq else channels
        self.pool = AttentiveStatsPool(n_feats, asp_hidden)
        self.fc = nn.Linear(2 * n_feats, emb_dim)

    def frame_features(self, latent):
        if self.flatten_freq:
            b, c, f, t = latent.shape
            return latent.reshape(b, c * f, t)
        return latent.mean(dim=2)

    def forward(self, latent):
        return self.fc(self.pool(self.frame_features(latent)))


class JointNet(nn.Module):
    """Baseline, U-Net, or extended U-Net system per `ModelConfig.mode`.

    The training path (`forward`) produces embeddings, speaker logits, and
    (for unet/exunet) enhanced spectrograms. The evaluation path (`embed`)
    uses the encoder alone for baseline/unet and the full
    encoder-decoder-extractor chain for exunet.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.scaled_widths
        self.encoder = Encoder(w, cfg.se_reduction)
        self.head = EmbeddingHead(
            w[4], cfg.emb_dim, cfg.asp_hidden, cfg.asp_flatten_freq
        )
        self.classifier = nn.Linear(cfg.emb_dim, cfg.n_speakers)
        if cfg.mode in ("unet", "exunet"):
            self.decoder = Decoder(w, cfg.se_reduction)
        if cfg.mode == "exunet":
            self.extractor = Extractor(w, cfg.se_reduction)
            self.apn_w = nn.Parameter(torch.tensor(10.0))
            self.apn_b = nn.Parameter(torch.tensor(-5.0))
        self.apply(init_weights)

    def forward(self, x) -> ForwardOutputs:
        latent, skips = self.encoder(x)
        enhanced = None
        if self.cfg.mode == "baseline":
            emb = self.head(latent)
        elif self.cfg.mode == "unet":
            emb = self.head(latent)
            enhanced, _ = self.decoder(latent, skips)
        else:
            enhanced, feats = self.decoder(latent, skips)
            emb = self.head(self.extractor(enhanced, feats))
        return ForwardOutputs(embeddings=emb, logits=self.classifier(emb),
                              enhanced=enhanced)

    def embed(self, x) -> torch.Tensor:
        latent, skips = self.encoder(x)
        if self.cfg.mode != "exunet":
            return self.head(latent)
        enhanced, feats = self.decoder(latent, skips)
        return self.head(self.extractor(enhanced, feats))


def init_weights(m):
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig, seed: int | None = None) -> JointNet:
    """Construct a model; a fixed seed gives bit-identical initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return JointNet(cfg)


def count_params(module: nn.Module) -> int:
    """Number of learnable scalars (excludes BN running statistics)."""
    return sum(p.numel() for p in module.parameters())


def pad_frames_to_multiple(values: np.ndarray, multiple: int = 4) -> np.ndarray:
    """Reflect-pad the frame axis of [F, T] features up to a multiple."""
    t = values.shape[1]
    rem = (-t) % multiple
    if rem == 0:
        return values
    if rem < t:
        return np.pad(values, ((0, 0), (0, rem)), mode="reflect")
    reps = int(np.ceil((t + rem) / t))
    return np.tile(values, (1, reps))[:, : t + rem]


def extract_embedding(
    model: JointNet,
    wave: Waveform,
    frontend_cfg: FrontendConfig = DEFAULT_FRONTEND,
) -> np.ndarray:
    """Deterministic inference-mode speaker embedding for one waveform."""
    return extract_embeddings(model, [wave], frontend_cfg)[0]


def extract_embeddings(
    model: JointNet,
    waves,
    frontend_cfg: FrontendConfig = DEFAULT_FRONTEND,
    batch_size: int = 64,
) -> np.ndarray:
    """Embeddings for many waveforms, batching equal-length feature groups."""
    feats = [
        pad_frames_to_multiple(log_mel(w, frontend_cfg).values, 4) for w in waves
    ]
    out = np.zeros((len(feats), model.cfg.emb_dim), dtype=np.float32)
    by_len: dict[int, list[int]] = {}
    for i, f in enumerate(feats):
        by_len.setdefault(f.shape[1], []).append(i)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for idxs in by_len.values():
            for lo in range(0, len(idxs), batch_size):
                chunk = idxs[lo : lo + batch_size]
                x = torch.from_numpy(np.stack([feats[i] for i in chunk])[:, None])
                emb = model.embed(x.float()).numpy()
                out[chunk] = emb
    if was_training:
        model.train()
    return out
