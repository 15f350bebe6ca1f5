"""Joint optimization of the pose network and its reconstruction critic.

Each iteration runs the two-player update in a fixed order: score the real
heatmaps with the critic, fit the pose network to its targets, score the
predicted heatmaps once, then update the critic before the pose network. The
single forward pass over predicted maps serves both players; leaf-filtered
backward passes keep each network constant in the other's objective.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .adversarial import (
    AdversarialState,
    LossReport,
    convergence_measure,
    loss_adv,
    loss_mse,
    update_kt,
)
from .data import SCHEMA_14, JointSchema, pck
from .heatmap import (
    FlipPairs,
    KeypointSet,
    PersonDescriptor,
    crop_input,
    decode_argmax,
    flip_average,
    flip_keypoints,
    heatmap_to_image_coords,
    keypoints_to_heatmap_space,
    render_targets,
)
from .network import (
    NetworkConfig,
    build_discriminator,
    build_generator,
    forward_discriminator,
    forward_generator,
    save_checkpoint,
)
from .tensor import ContractViolation, RngStream, Tensor, backward, no_grad, reset_tape, scale


class TrainingFault(RuntimeError):
    """A gradient or parameter stopped being finite."""


class RMSprop:
    """Per-element learning rates from a decaying mean of squared gradients.

    ``step`` rebinds each parameter's array instead of writing into it, so
    closures recorded during the forward pass keep seeing the values they were
    built from even after the owner network has been updated.
    """

    def __init__(self, params, lr: float, rho: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.acc = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, acc in zip(self.params, self.acc):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingFault("non-finite gradient")
            acc *= self.rho
            acc += (1.0 - self.rho) * (g * g)
            new = p.data - self.lr * g / (np.sqrt(acc) + self.eps)
            if not np.all(np.isfinite(new)):
                raise TrainingFault("non-finite parameter after update")
            p.data = new

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 6
    lr: float = 2.5e-4
    lr_decay_epoch: int = 60
    lr_decay_factor: float = 0.1
    flip_prob: float = 0.5
    max_rotation_deg: float = 30.0
    scale_jitter: tuple = (0.75, 1.25)
    sigma: float = 1.0
    adversarial: bool = True
    update_d: bool = True
    lambda_g: float = 0.01
    lambda_k: float = 0.001
    gamma: float = 0.5
    k0: float = 0.0
    eval_every: int = 0  # epochs between held-out evaluations, 0 disables
    patience: int = 0  # consecutive non-improving evaluations tolerated, 0 disables
    checkpoint_every: int = 1  # epochs between checkpoints, 0 keeps only the final one

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be positive")
        if self.lr <= 0 or self.lr_decay_factor <= 0:
            raise ContractViolation("learning rate settings must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ContractViolation("flip_prob must lie in [0, 1]")
        if self.max_rotation_deg < 0:
            raise ContractViolation("max_rotation_deg must be non-negative")
        lo, hi = self.scale_jitter
        if not 0 < lo <= hi:
            raise ContractViolation("scale_jitter must be a positive (lo, hi) range")
        if self.sigma <= 0:
            raise ContractViolation("sigma must be positive")
        try:
            AdversarialState(
                k_t=self.k0, lambda_k=self.lambda_k, gamma=self.gamma, lambda_g=self.lambda_g
            ).validate()
        except Exception as exc:
            raise ContractViolation(f"controller settings rejected: {exc}") from exc
        return self


CSV_HEADER = "iter,epoch,l_mse,l_adv,l_g,l_real,l_fake,l_d,k_t,conv,wall_ms"


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    rotation_deg: float
    scale_jitter: float


def draw_augmentation(cfg: TrainConfig, rng: RngStream) -> AugmentParams:
    # draw order is part of the reproducibility contract
    flip = rng.uniform() < cfg.flip_prob
    rot = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    jitter = rng.uniform(*cfg.scale_jitter)
    return AugmentParams(flip=flip, rotation_deg=rot, scale_jitter=jitter)


def apply_augmentation(image, record, params: AugmentParams, net_cfg: NetworkConfig,
                       sigma: float, pairs: FlipPairs):
    """Crop plus rendered target for one sample under fixed augmentation."""
    kps = record.keypoints
    person = record.person
    if params.flip:
        width = image.shape[2]
        image = image[:, :, ::-1]
        kps = flip_keypoints(kps, width, pairs)
        person = PersonDescriptor(
            center=(width - 1.0 - person.center[0], person.center[1]),
            scale=person.scale,
        )
    crop, tf = crop_input(
        image, person, net_cfg.input_res,
        rotation_deg=params.rotation_deg, scale_jitter=params.scale_jitter,
    )
    kps_hm = keypoints_to_heatmap_space(kps, tf)
    target = render_targets(kps_hm, net_cfg.heatmap_res, sigma)
    return crop, target


# ---------------------------------------------------------------------------
# one optimization step


@dataclass
class IterationResult:
    report: LossReport
    trace: list
    tensors: dict = field(default_factory=dict)


def train_iteration(gen, images, targets, opt_g, disc=None, opt_d=None,
                    state: AdversarialState | None = None, update_d: bool = True):
    """One update of the pose network, and of the critic when one is given.

    Returns ``(state, IterationResult)``; ``state`` advances only in the
    adversarial configuration. The trace lists the stages actually executed,
    in order.
    """
    if images.ndim != 4 or targets.ndim != 4 or images.shape[0] != targets.shape[0]:
        raise ContractViolation("images and targets must be batched alike")
    if disc is not None and state is None:
        raise ContractViolation("adversarial updates need a controller state")

    reset_tape()
    gen.zero_grad()
    trace = []
    tensors = {}
    images_t = Tensor(images)
    targets_t = Tensor(targets)

    if disc is not None:
        disc.zero_grad()
        cond = images_t if disc.conditional else None
        trace.append("forward_d_real")
        recon_real = forward_discriminator(disc, targets_t, image=cond, training=True)
        l_real_t = loss_adv(targets_t, recon_real)
        trace.append("grad_d_real")
        backward(l_real_t, leaves=disc.parameters())
        tensors["l_real"] = l_real_t

    trace.append("forward_g")
    preds = forward_generator(gen, images_t, training=True)
    l_mse_t = loss_mse(preds, targets_t)
    tensors["l_mse"] = l_mse_t
    trace.append("grad_g_mse")
    backward(l_mse_t, leaves=gen.parameters())

    if disc is None:
        trace.append("update_g")
        opt_g.step()
        m = l_mse_t.item()
        report = LossReport(
            l_mse=m, l_adv=0.0, l_g=m, l_real=0.0, l_fake=0.0, l_d=0.0,
            k_t=0.0, convergence=0.0,
        )
        return state, IterationResult(report, trace, tensors)

    k = state.k_t
    trace.append("forward_d_fake")
    recon_fake = forward_discriminator(disc, preds[-1], image=cond, training=True)
    l_fake_t = loss_adv(preds[-1], recon_fake)
    tensors["l_fake"] = l_fake_t
    trace.append("grad_d_fake")
    backward(scale(l_fake_t, -k), leaves=disc.parameters())
    if update_d:
        trace.append("update_d")
        opt_d.step()
    if state.lambda_g != 0.0:
        # the critic was already updated; this flows through the forward-time
        # closures, so the pose network sees the critic it was scored by
        trace.append("grad_g_adv")
        backward(scale(l_fake_t, state.lambda_g), leaves=gen.parameters())
    trace.append("update_g")
    opt_g.step()

    l_real = l_real_t.item()
    l_fake = l_fake_t.item()
    l_mse = l_mse_t.item()
    report = LossReport(
        l_mse=l_mse,
        l_adv=l_fake,
        l_g=l_mse + state.lambda_g * l_fake,
        l_real=l_real,
        l_fake=l_fake,
        l_d=l_real - k * l_fake,
        k_t=k,
        convergence=convergence_measure(l_real, l_fake, state.gamma),
    )
    return update_kt(state, l_real, l_fake), IterationResult(report, trace, tensors)


# ---------------------------------------------------------------------------
# full loop


@dataclass
class TrainResult:
    generator: object
    discriminator: object
    state: AdversarialState
    reports: list
    evals: list  # (epoch, PckResult) pairs
    csv_path: str


def _format_row(it, epoch, r: LossReport, wall_ms: float) -> str:
    vals = [r.l_mse, r.l_adv, r.l_g, r.l_real, r.l_fake, r.l_d, r.k_t, r.convergence, wall_ms]
    return f"{it},{epoch}," + ",".join(f"{v:.9g}" for v in vals)


def train_loop(net_cfg: NetworkConfig, cfg: TrainConfig, samples, out_dir, seed,
               schema: JointSchema = SCHEMA_14, val_samples=None, clock=None) -> TrainResult:
    """Train on (image, record) pairs; log one CSV row per iteration.

    Every random decision is drawn from children of one root stream keyed by
    role, epoch and sample identity, so a run is reproducible from its seed
    regardless of batch boundaries. ``clock`` (a seconds callable) opts into
    real wall times; without it the timing column is written as zero so logs
    from identical runs match byte for byte.
    """
    net_cfg.validate()
    cfg.validate()
    if len(samples) < cfg.batch_size:
        raise ContractViolation("need at least one full batch of samples")
    os.makedirs(out_dir, exist_ok=True)

    master = RngStream(seed)
    gen = build_generator(net_cfg, master.child(1))
    disc = opt_d = None
    state = AdversarialState(
        k_t=cfg.k0, lambda_k=cfg.lambda_k, gamma=cfg.gamma, lambda_g=cfg.lambda_g
    )
    if cfg.adversarial:
        disc = build_discriminator(net_cfg, master.child(2))
        opt_d = RMSprop(disc.parameters(), cfg.lr)
    opt_g = RMSprop(gen.parameters(), cfg.lr)
    pairs = FlipPairs(schema.flip_pairs)

    reports = []
    evals = []
    best = float("-inf")
    stale = 0
    it = 0
    csv_path = os.path.join(out_dir, "train_log.csv")
    with open(csv_path, "w") as log:
        log.write(CSV_HEADER + "\n")
        for epoch in range(cfg.epochs):
            if epoch == cfg.lr_decay_epoch:
                opt_g.lr *= cfg.lr_decay_factor
                if opt_d is not None:
                    opt_d.lr *= cfg.lr_decay_factor
            order = master.child(3, epoch).permutation(len(samples))
            for b0 in range(0, len(samples) - cfg.batch_size + 1, cfg.batch_size):
                crops, targets = [], []
                for di in order[b0 : b0 + cfg.batch_size]:
                    img, rec = samples[di]
                    params = draw_augmentation(cfg, master.child(4, epoch, int(di)))
                    crop, tgt = apply_augmentation(img, rec, params, net_cfg, cfg.sigma, pairs)
                    crops.append(crop)
                    targets.append(tgt)
                images = np.stack(crops)
                tgts = np.stack(targets)
                t0 = clock() if clock is not None else None
                state, result = train_iteration(
                    gen, images, tgts, opt_g,
                    disc=disc, opt_d=opt_d, state=state, update_d=cfg.update_d,
                )
                wall_ms = (clock() - t0) * 1000.0 if clock is not None else 0.0
                it += 1
                log.write(_format_row(it, epoch, result.report, wall_ms) + "\n")
                reports.append(result.report)

            if cfg.eval_every and val_samples and (epoch + 1) % cfg.eval_every == 0:
                res = evaluate(gen, net_cfg, val_samples, schema=schema)
                evals.append((epoch + 1, res))
                if res.total > best:
                    best = res.total
                    stale = 0
                else:
                    stale += 1
                if cfg.patience and stale >= cfg.patience:
                    break
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(gen, os.path.join(out_dir, f"ckpt_epoch_{epoch + 1}.bin"))

    save_checkpoint(gen, os.path.join(out_dir, "generator.bin"))
    reset_tape()
    return TrainResult(gen, disc, state, reports, evals, csv_path)


# ---------------------------------------------------------------------------
# inference


def infer(gen, net_cfg: NetworkConfig, image, person: PersonDescriptor, pairs: FlipPairs):
    """Image-space keypoints for one person, averaging mirrored predictions."""
    crop, tf = crop_input(image, person, net_cfg.input_res)
    mirrored = np.ascontiguousarray(crop[:, :, ::-1])
    with no_grad():
        out = forward_generator(gen, Tensor(crop[None]), training=False)[-1].data[0]
        out_m = forward_generator(gen, Tensor(mirrored[None]), training=False)[-1].data[0]
    merged = flip_average(out, out_m, pairs)
    kps_hm, scores = decode_argmax(merged)
    return heatmap_to_image_coords(kps_hm, tf), scores


def predictor_for(gen, net_cfg: NetworkConfig, schema: JointSchema = SCHEMA_14):
    pairs = FlipPairs(schema.flip_pairs)

    def predict(image, person) -> KeypointSet:
        return infer(gen, net_cfg, image, person, pairs)[0]

    return predict


def evaluate(gen, net_cfg: NetworkConfig, samples, schema: JointSchema = SCHEMA_14,
             r: float = 0.2):
    predict = predictor_for(gen, net_cfg, schema)
    preds = [predict(img, rec.person) for img, rec in samples]
    return pck(preds, [rec for _, rec in samples], r=r, schema=schema)
