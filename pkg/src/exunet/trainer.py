"""Mini-batch construction, the joint training loop, and gradient checking.

A batch holds one clean and one noisy utterance for each of n sampled
speakers (the noisy one mixed at a uniformly drawn SNR from the train noise
pool) plus the clean spectrogram targets of the noisy halves. Training is
Adam on the mode's total loss with the stepped geometric lr decay; runs are
bit-reproducible given the seed and single-threaded execution.
"""

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import checkpoint as ckpt
from .corpus import CorpusAudioSource, mix_at_snr
from .frontend import DEFAULT_FRONTEND, FrontendConfig, log_mel
from .losses import apn_loss, apn_similarity, cce_loss, mse_fe_loss, total_loss
from .netcore import MODES, ModelConfig, build_model, count_params, pad_frames_to_multiple


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "baseline"
    n_speakers_per_batch: int = 10
    epochs: int = 30
    lr0: float = 0.001
    lr_decay: float = 0.95
    lr_decay_every: int = 10
    # "arithmetic" subtracts the decay fraction of the *initial* rate instead
    # of compounding it
    lr_decay_mode: str = "geometric"
    snr_low: float = 0.0
    snr_high: float = 20.0
    crop_frames: int = 200
    seed: int = 0
    augment_noise: bool = True
    widths: tuple = (16, 16, 32, 64, 128)
    width_scale: float = 1.0
    emb_dim: int = 256
    mse_literal: bool = False
    loss_weights: tuple = (1.0, 1.0, 1.0)
    checkpoint_every: int = 0  # 0: checkpoint only at the end
    num_threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not (-10.0 <= self.snr_low <= self.snr_high <= 40.0):
            raise ValueError("snr range must lie within [-10, 40]")
        if self.crop_frames < 4 or self.crop_frames % 4 != 0:
            raise ValueError("crop_frames must be a positive multiple of 4")
        if self.n_speakers_per_batch < 1:
            raise ValueError("need at least one speaker per batch")
        if self.lr_decay_mode not in ("geometric", "arithmetic"):
            raise ValueError("lr_decay_mode must be geometric or arithmetic")


@dataclass
class MiniBatch:
    x: torch.Tensor  # [2n, 1, F, T]: n clean then n noisy items
    clean_targets: torch.Tensor  # [2n, 1, F, T]
    labels: torch.Tensor  # [n] class indices
    snrs: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def all_labels(self) -> torch.Tensor:
        return torch.cat([self.labels, self.labels])


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    steps = epoch // cfg.lr_decay_every
    if cfg.lr_decay_mode == "arithmetic":
        return cfg.lr0 * max(0.0, 1.0 - (1.0 - cfg.lr_decay) * steps)
    return cfg.lr0 * cfg.lr_decay**steps


def _crop_or_pad(values: np.ndarray, crop: int, rng) -> tuple[np.ndarray, int]:
    """Random crop (or reflect-tile pad) to `crop` frames; returns the start
    frame so a paired tensor can reuse the same window."""
    t = values.shape[1]
    if t < crop:
        values = pad_frames_to_multiple(values, crop)
        t = values.shape[1]
    t0 = int(rng.integers(0, t - crop + 1))
    return values[:, t0 : t0 + crop], t0


def sample_minibatch(
    source: CorpusAudioSource,
    noise_train,
    cfg: TrainConfig,
    rng: np.random.Generator,
    frontend_cfg: FrontendConfig = DEFAULT_FRONTEND,
    label_map: dict | None = None,
    feature_cache: dict | None = None,
) -> MiniBatch:
    """Draw n speakers without replacement, two distinct utterances each;
    the second is noise-mixed (when augmenting) and keeps its clean
    spectrogram as the enhancement target.

    `feature_cache` memoizes clean full-utterance features (crops and noise
    draws stay per-step)."""
    manifest = source.manifest
    n = cfg.n_speakers_per_batch
    speaker_ids = sorted(s.id for s in manifest.speakers)
    if len(speaker_ids) < n:
        raise ValueError(f"corpus has {len(speaker_ids)} speakers, batch needs {n}")
    if label_map is None:
        label_map = {sid: i for i, sid in enumerate(speaker_ids)}
    by_speaker: dict[int, list[str]] = {sid: [] for sid in speaker_ids}
    for u in manifest.utterances:
        by_speaker[u.speaker_id].append(
            f"s{u.speaker_id:04d}u{u.utterance_index:02d}"
        )
    chosen = rng.choice(speaker_ids, size=n, replace=False)

    def clean_features(key):
        if feature_cache is None:
            return log_mel(source.utterance(key), frontend_cfg).values
        if key not in feature_cache:
            feature_cache[key] = log_mel(source.utterance(key), frontend_cfg).values
        return feature_cache[key]

    clean_x, noisy_x, noisy_target, labels, snrs = [], [], [], [], []
    for sid in chosen:
        utts = sorted(by_speaker[sid])
        if len(utts) < 2:
            raise ValueError(f"speaker {sid} has fewer than 2 utterances")
        i1, i2 = rng.choice(len(utts), size=2, replace=False)
        s1 = clean_features(utts[i1])
        s2_clean = clean_features(utts[i2])
        if cfg.augment_noise:
            w2 = source.utterance(utts[i2])
            noise = noise_train[int(rng.integers(0, len(noise_train)))]
            snr = float(rng.uniform(cfg.snr_low, cfg.snr_high))
            offset = int(rng.integers(0, noise.samples.size))
            w2_in = mix_at_snr(w2, noise, snr, noise_offset=offset)
            s2_noisy = log_mel(w2_in, frontend_cfg).values
            snrs.append(snr)
        else:
            s2_noisy = s2_clean
            snrs.append(None)

        s1c, _ = _crop_or_pad(s1, cfg.crop_frames, rng)
        s2n, t0 = _crop_or_pad(s2_noisy, cfg.crop_frames, rng)
        s2_target = s2_clean
        if s2_target.shape[1] < cfg.crop_frames:
            s2_target = pad_frames_to_multiple(s2_target, cfg.crop_frames)
        s2c = s2_target[:, t0 : t0 + cfg.crop_frames]

        clean_x.append(s1c)
        noisy_x.append(s2n)
        noisy_target.append(s2c)
        labels.append(label_map[int(sid)])

    x = torch.from_numpy(np.stack(clean_x + noisy_x)[:, None]).float()
    targets = torch.from_numpy(np.stack(clean_x + noisy_target)[:, None]).float()
    return MiniBatch(
        x=x,
        clean_targets=targets,
        labels=torch.tensor(labels, dtype=torch.long),
        snrs=snrs,
    )


def compute_losses(model, batch: MiniBatch, cfg: TrainConfig):
    out = model(batch.x)
    n = batch.n
    cce = cce_loss(out.logits, batch.all_labels)
    mse = apn = None
    if cfg.mode in ("unet", "exunet"):
        mse = mse_fe_loss(
            out.enhanced[:n],
            out.enhanced[n:],
            batch.clean_targets[:n],
            batch.clean_targets[n:],
            literal=cfg.mse_literal,
        )
    if cfg.mode == "exunet":
        sim = apn_similarity(
            out.embeddings[:n], out.embeddings[n:], model.apn_w, model.apn_b
        )
        apn = apn_loss(sim)
    return total_loss(cfg.mode, cce=cce, mse=mse, apn=apn, weights=cfg.loss_weights)


def steps_per_epoch(manifest, cfg: TrainConfig) -> int:
    return max(1, math.ceil(len(manifest.utterances) / (2 * cfg.n_speakers_per_batch)))


def train(
    source: CorpusAudioSource,
    cfg: TrainConfig,
    run_dir,
    frontend_cfg: FrontendConfig = DEFAULT_FRONTEND,
    resume_from=None,
    log_name="train_log.jsonl",
):
    """Run the optimization loop; returns (checkpoint path, log path, model).

    Checkpoints carry model, optimizer, and rng state at epoch boundaries, so
    a resumed run replays the uninterrupted one bit for bit (single-threaded).
    """
    torch.set_num_threads(max(1, cfg.num_threads))
    os.makedirs(run_dir, exist_ok=True)
    manifest = source.manifest
    noise_train = source.train_noises() if cfg.augment_noise else []
    if cfg.augment_noise and not noise_train:
        raise ValueError("augmentation requested but the manifest has no train noise")
    label_map = {s.id: i for i, s in enumerate(sorted(manifest.speakers, key=lambda s: s.id))}

    model_cfg = ModelConfig(
        mode=cfg.mode,
        widths=tuple(cfg.widths),
        width_scale=cfg.width_scale,
        emb_dim=cfg.emb_dim,
        n_speakers=len(manifest.speakers),
    )
    train_cfg_dict = dataclasses.asdict(cfg) | {
        "widths": list(cfg.widths),
        "loss_weights": list(cfg.loss_weights),
    }

    start_epoch = 0
    global_step = 0
    if resume_from is None:
        model = build_model(model_cfg, seed=cfg.seed)
        optimizer = torch.optim.Adam(
            model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8
        )
        rng = np.random.default_rng([cfg.seed, 1])
    else:
        model, manifest_ck = ckpt.restore_model(resume_from)
        _, arrays = ckpt.load_checkpoint(resume_from)
        optimizer = torch.optim.Adam(
            model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8
        )
        ckpt.restore_optimizer(optimizer, manifest_ck, arrays)
        rng = ckpt.restore_rng(manifest_ck, arrays)
        start_epoch = manifest_ck["epoch"]
        global_step = manifest_ck["step"]
        model.train()

    n_steps = steps_per_epoch(manifest, cfg)
    ckpt_path = os.path.join(run_dir, "checkpoint.ckpt")
    log_path = os.path.join(run_dir, log_name)
    model.train()
    feature_cache: dict = {}

    with open(log_path, "a", encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            sums = {"cce": 0.0, "mse": 0.0, "apn": 0.0, "total": 0.0}
            for _ in range(n_steps):
                batch = sample_minibatch(
                    source, noise_train, cfg, rng, frontend_cfg, label_map,
                    feature_cache,
                )
                loss, bundle = compute_losses(model, batch, cfg)
                if not math.isfinite(bundle.total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {global_step}: "
                        f"{bundle}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                if cfg.mode == "exunet":
                    with torch.no_grad():
                        model.apn_w.clamp_(min=1e-6)
                global_step += 1
                for k in sums:
                    sums[k] += getattr(bundle, k)
            record = {
                "epoch": epoch,
                "lr": lr,
                "steps": n_steps,
                **{k: sums[k] / n_steps for k in sums},
            }
            log.write(json.dumps(record) + "\n")
            log.flush()
            done = epoch + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                ckpt.save_checkpoint(
                    ckpt_path, model, train_cfg_dict, done, global_step, optimizer, rng
                )
    ckpt.save_checkpoint(
        ckpt_path, model, train_cfg_dict, cfg.epochs, global_step, optimizer, rng
    )
    return ckpt_path, log_path, model


# ---------------------------------------------------------------------------
# finite-difference gradient checking


TINY_WIDTHS = (2, 2, 2, 2, 2)


def tiny_train_config(mode: str, n_speakers: int = 2, seed: int = 0) -> TrainConfig:
    return TrainConfig(
        mode=mode,
        n_speakers_per_batch=n_speakers,
        widths=TINY_WIDTHS,
        emb_dim=8,
        crop_frames=8,
        seed=seed,
    )


def _random_tiny_batch(mode, n, freq_bins, frames, n_classes, rng):
    x = torch.from_numpy(rng.standard_normal((2 * n, 1, freq_bins, frames)))
    targets = torch.from_numpy(rng.standard_normal((2 * n, 1, freq_bins, frames)))
    labels = torch.from_numpy(rng.integers(0, n_classes, size=n))
    return MiniBatch(x=x, clean_targets=targets, labels=labels)


def _term_loss(model, batch, term, mse_literal=False):
    out = model(batch.x)
    n = batch.n
    if term == "cce":
        return cce_loss(out.logits, batch.all_labels)
    if term == "mse":
        return mse_fe_loss(
            out.enhanced[:n],
            out.enhanced[n:],
            batch.clean_targets[:n],
            batch.clean_targets[n:],
            literal=mse_literal,
        )
    if term == "apn":
        sim = apn_similarity(
            out.embeddings[:n], out.embeddings[n:], model.apn_w, model.apn_b
        )
        return apn_loss(sim)
    raise ValueError(f"unknown loss term {term!r}")


def loss_terms_for(mode: str):
    return {"baseline": ("cce",), "unet": ("cce", "mse"),
            "exunet": ("cce", "mse", "apn")}[mode]


def _probe_losses(model, batch, term, p, offset, h):
    with torch.no_grad():
        flat = p.reshape(-1)
        orig = float(flat[offset])
        flat[offset] = orig + h
        up = float(_term_loss(model, batch, term))
        flat[offset] = orig - h
        down = float(_term_loss(model, batch, term))
        flat[offset] = orig
    return up, down


def grad_check(
    mode: str,
    n_params_sampled: int = 20,
    h: float = 1e-5,
    tol: float = 1e-3,
    seed: int = 0,
    n_speakers: int = 2,
    terms=None,
):
    """Compare analytic gradients against central finite differences on a
    tiny double-precision model; returns a per-term report dict.

    Finite differences are only meaningful where the loss is smooth over the
    probe interval; rectifier kinks and extreme curvature make individual
    probes invalid at any fixed step. A probe is kept only when its forward
    and backward one-sided differences agree and its central differences at h
    and h/2 agree; contaminated probes are replaced by freshly sampled
    parameters (a genuine gradient bug would produce self-consistent finite
    differences that still contradict autograd, so the filtering cannot mask
    one). Relative error uses a floor of tol so that absolute deviations
    below tol^2 on near-zero gradients count as noise, not failures.
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    cfg = ModelConfig(
        mode=mode, widths=TINY_WIDTHS, emb_dim=8, n_speakers=3, asp_hidden=4
    )
    model = build_model(cfg).double()
    model.train()
    batch = _random_tiny_batch(mode, n_speakers, 8, 8, cfg.n_speakers, rng)

    params = [(name, p) for name, p in model.named_parameters()]
    flat_sizes = [p.numel() for _, p in params]
    total = sum(flat_sizes)
    report = {"mode": mode, "h": h, "tol": tol, "terms": {}, "pass": True}
    for term in terms or loss_terms_for(mode):
        loss = _term_loss(model, batch, term)
        grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
        f0 = float(loss.detach())
        candidates = rng.permutation(total)
        worst = 0.0
        n_checked = 0
        n_nonsmooth = 0
        for flat_idx in candidates:
            if n_checked >= n_params_sampled:
                break
            pi, offset = 0, int(flat_idx)
            while offset >= flat_sizes[pi]:
                offset -= flat_sizes[pi]
                pi += 1
            name, p = params[pi]
            analytic = (
                0.0 if grads[pi] is None else float(grads[pi].reshape(-1)[offset])
            )
            up, down = _probe_losses(model, batch, term, p, offset, h)
            up2, down2 = _probe_losses(model, batch, term, p, offset, h / 2)
            fwd = (up - f0) / h
            bwd = (f0 - down) / h
            fd = (up - down) / (2 * h)
            fd2 = (up2 - down2) / h
            scale = max(abs(fwd), abs(bwd), abs(fd), tol)
            if abs(fwd - bwd) > 2e-3 * scale or abs(fd - fd2) > 5e-4 * scale:
                n_nonsmooth += 1
                continue
            rel = abs(analytic - fd2) / max(abs(analytic), abs(fd2), tol)
            worst = max(worst, rel)
            n_checked += 1
        ok = worst <= tol and n_checked >= min(n_params_sampled, total)
        report["terms"][term] = {
            "max_rel_err": worst,
            "n_checked": n_checked,
            "n_nonsmooth_skipped": n_nonsmooth,
            "pass": ok,
        }
        report["pass"] = report["pass"] and ok
    return report
