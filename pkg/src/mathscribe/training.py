"""Training orchestration: GAN loop, bulk synthesis, recognizer loop.

Each discriminator step minimizes the hinge loss plus lambda times the
recognition loss; the task model's parameters live in the discriminator's
optimizer, so they move only in that phase.  The generator step then
minimizes its hinge loss plus lambda times the recognition loss on fresh
fakes, which is what pressures it to keep symbols legible.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import GANTrainConfig, RecTrainConfig, SynthesisConfig, write_resolved
from .corpus import FormulaRecord, HANDWRITTEN, RENDERED, Vocabulary
from .data import Batch, EqualMixSampler, EmptyDataset, TrainingSet, assemble_batch, load_training_set, record_seed
from .gan import Discriminator, GANLosses, GANModelConfig, Generator, combine_losses, hinge_d_loss, hinge_g_loss
from .images import normalize_intensity, pad_width_to_multiple, resize_to_height, save_png
from .manifest import write_manifest
from .recognizer import Recognizer, RecognizerConfig, batch_task_loss
from .rendering import RenderError, RenderFailure, RenderParams, RendererBackend, StubRenderer, render, sample_render_params

__all__ = [
    "NonFiniteLoss",
    "FilterViolation",
    "GANBundle",
    "build_gan_bundle",
    "gan_train_step",
    "train_gan",
    "SynthesisStats",
    "synthesize_dataset",
    "PlateauScheduler",
    "train_recognizer",
    "params_fingerprint",
    "normalization_height_rule",
]

GAN_KIND = "gan"


class NonFiniteLoss(RuntimeError):
    pass


class FilterViolation(ValueError):
    pass


def params_fingerprint(module: torch.nn.Module) -> str:
    """Order-stable hash of all parameter values."""
    h = hashlib.blake2b(digest_size=16)
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _task_config(preset: str, vocab_size: int) -> RecognizerConfig:
    factory = {"small": RecognizerConfig.small, "large": RecognizerConfig.large, "tiny": RecognizerConfig.tiny}
    if preset not in factory:
        raise ValueError(f"unknown task preset {preset!r}")
    return factory[preset](vocab_size)


def _gan_config(preset: str, spectral_norm: bool) -> GANModelConfig:
    if preset == "tiny":
        base = GANModelConfig.tiny()
    elif preset == "default":
        base = GANModelConfig()
    else:
        raise ValueError(f"unknown gan preset {preset!r}")
    return GANModelConfig.from_dict({**base.to_dict(), "spectral_norm": spectral_norm})


@dataclass
class GANBundle:
    generator: Generator
    discriminator: Discriminator
    task: Recognizer
    opt_d: torch.optim.Optimizer  # discriminator + task parameters
    opt_g: torch.optim.Optimizer
    vocab: Vocabulary


def build_gan_bundle(cfg: GANTrainConfig, vocab: Vocabulary) -> GANBundle:
    torch.manual_seed(cfg.seed)
    gen = Generator(_gan_config(cfg.gan_preset, cfg.spectral_norm))
    disc = Discriminator(gen.cfg)
    task = Recognizer(_task_config(cfg.task_preset, len(vocab)))
    betas = (cfg.beta1, cfg.beta2)
    opt_d = torch.optim.Adam(list(disc.parameters()) + list(task.parameters()), lr=cfg.lr_d, betas=betas)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=betas)
    return GANBundle(gen, disc, task, opt_d, opt_g, vocab)


def _check_filters(batch: Batch, cfg: GANTrainConfig) -> None:
    for h, w in batch.extents:
        if h != cfg.input_height:
            raise FilterViolation(f"image height {h} != required {cfg.input_height}")
        if w > cfg.max_width:
            raise FilterViolation(f"image width {w} exceeds {cfg.max_width}")
    lengths = (batch.targets != Vocabulary.pad_id).sum(dim=1) - 1  # minus EOS
    if int(lengths.max()) > cfg.max_tokens:
        raise FilterViolation(f"sequence length {int(lengths.max())} exceeds {cfg.max_tokens}")


def gan_train_step(
    bundle: GANBundle,
    real_batch: Batch,
    source_batch: Batch,
    cfg: GANTrainConfig,
    zgen: torch.Generator,
    verify_task_isolation: bool = False,
) -> GANLosses:
    """One discriminator(+task) update on L_DT, then one generator update on L_GT.

    ``verify_task_isolation`` fingerprints the task model around the
    generator phase and raises if anything moved it there.
    """
    _check_filters(real_batch, cfg)
    _check_filters(source_batch, cfg)
    gen, disc, task = bundle.generator, bundle.discriminator, bundle.task
    b = len(source_batch)
    if cfg.swap_target:
        target = torch.randint(0, 2, (b,), generator=zgen)
    else:
        target = 1 - source_batch.domains
    z = torch.randn(b, gen.cfg.z_dim, generator=zgen)

    gen.train()
    disc.train()
    task.train()

    # Discriminator + task phase.
    with torch.no_grad():
        fake = gen(source_batch.images, z, target)
    l_d = hinge_d_loss(disc(real_batch.images, real_batch.domains), disc(fake, target))
    grad_task = torch.enable_grad() if cfg.lam > 0 else torch.no_grad()
    with grad_task:
        l_t_real = batch_task_loss(
            task.teacher_forced_logits(real_batch.images, real_batch.targets, real_batch.extents),
            real_batch.targets,
        )
        l_t_fake = batch_task_loss(
            task.teacher_forced_logits(fake, source_batch.targets, source_batch.extents),
            source_batch.targets,
        )
        l_t = 0.5 * (l_t_real + l_t_fake)
    l_dt = l_d + cfg.lam * l_t
    bundle.opt_d.zero_grad(set_to_none=True)
    l_dt.backward()
    bundle.opt_d.step()

    # Generator phase.  The task model is eval-frozen: its parameters are
    # absent from opt_g and its batchnorm statistics must not move here.
    task.eval()
    pre_g = params_fingerprint(task) if verify_task_isolation else None
    fake2 = gen(source_batch.images, z, target)
    l_g = hinge_g_loss(disc(fake2, target))
    l_gt = l_g
    if cfg.lam > 0:
        l_t_gen = batch_task_loss(
            task.teacher_forced_logits(fake2, source_batch.targets, source_batch.extents),
            source_batch.targets,
        )
        l_gt = l_g + cfg.lam * l_t_gen
    bundle.opt_g.zero_grad(set_to_none=True)
    l_gt.backward()
    bundle.opt_g.step()
    if verify_task_isolation and params_fingerprint(task) != pre_g:
        raise RuntimeError("task-model parameters changed during the generator phase")

    losses = combine_losses(l_d.detach().item(), l_g.detach().item(), l_t.detach().item(), cfg.lam)
    if not losses.is_finite():
        raise NonFiniteLoss(f"non-finite losses: {losses}")
    return losses


def _gan_checkpoint_config(bundle: GANBundle, cfg: GANTrainConfig) -> dict:
    return {
        "generator": bundle.generator.cfg.to_dict(),
        "task": bundle.task.cfg.to_dict(),
        "input_height": cfg.input_height,
    }


def _save_gan_checkpoint(path: Path, bundle: GANBundle, cfg: GANTrainConfig, iteration: int) -> None:
    save_checkpoint(
        path,
        kind=GAN_KIND,
        config=_gan_checkpoint_config(bundle, cfg),
        state={
            "generator": bundle.generator.state_dict(),
            "discriminator": bundle.discriminator.state_dict(),
            "task": bundle.task.state_dict(),
        },
        extra={"iteration": iteration, "vocab": list(bundle.vocab.tokens)},
    )


def train_gan(
    cfg: GANTrainConfig,
    rendered_dir,
    handwritten_dir,
    out_dir,
    step_callback=None,
    verify_task_isolation: bool = False,
) -> dict:
    """Train the translator on a rendered + handwritten dataset pair.

    Writes config.resolved, a metrics CSV (step, l_d, l_g, l_t, lr), the
    requested intermediate checkpoints, and gan_final.ckpt.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)

    rendered = load_training_set(rendered_dir, cfg.input_height, cfg.max_width, cfg.max_tokens, domain=RENDERED)
    handwritten = load_training_set(
        handwritten_dir, cfg.input_height, cfg.max_width, cfg.max_tokens, vocab=rendered.vocab, domain=HANDWRITTEN
    )
    vocab = rendered.vocab
    bundle = build_gan_bundle(cfg, vocab)

    rng = np.random.default_rng(cfg.seed)
    zgen = torch.Generator().manual_seed(cfg.seed)
    sampler = EqualMixSampler([rendered, handwritten], rng)
    augment_domains = frozenset(
        ([RENDERED] if cfg.augment_rendered else []) + ([HANDWRITTEN] if cfg.augment_handwritten else [])
    )

    checkpoints: dict[int, str] = {}
    metrics_path = out / "metrics.csv"
    with metrics_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_d", "l_g", "l_t", "lr"])
        for step in range(1, cfg.max_iterations + 1):
            picks = sampler.picks(cfg.batch_size)
            batch = assemble_batch(
                [rendered, handwritten],
                picks,
                vocab,
                rng=rng,
                augment_domains=augment_domains,
                max_width=cfg.max_width,
                size_multiple=16,
            )
            if cfg.bidirectional:
                source_batch = batch
            else:
                src_picks = [(0, int(rng.integers(len(rendered)))) for _ in range(cfg.batch_size)]
                source_batch = assemble_batch(
                    [rendered], src_picks, vocab, rng=rng, augment_domains=augment_domains,
                    max_width=cfg.max_width, size_multiple=16,
                )
            losses = gan_train_step(bundle, batch, source_batch, cfg, zgen, verify_task_isolation)
            if step_callback is not None:
                step_callback(step, bundle, losses)
            if step == 1 or step == cfg.max_iterations or step % cfg.log_every == 0:
                writer.writerow([step, losses.l_d, losses.l_g, losses.l_t, cfg.lr_d])
            if step in cfg.checkpoint_iterations:
                path = out / f"gan_{step:07d}.ckpt"
                _save_gan_checkpoint(path, bundle, cfg, step)
                checkpoints[step] = str(path)

    final = out / "gan_final.ckpt"
    _save_gan_checkpoint(final, bundle, cfg, cfg.max_iterations)
    return {"final": str(final), "checkpoints": checkpoints, "metrics": str(metrics_path), "last_losses": losses}


# ---------------------------------------------------------------------------
# Bulk synthesis
# ---------------------------------------------------------------------------


@dataclass
class SynthesisStats:
    accepted: int = 0
    skipped_area: int = 0
    failed_render: int = 0


def area_within_limit(height: int, width: int, max_pixel_area: int) -> bool:
    """Strict bound: the pixel area must be smaller than the limit."""
    return height * width < max_pixel_area


def load_generator(checkpoint_path) -> tuple[Generator, Vocabulary, dict]:
    payload = load_checkpoint(checkpoint_path, expected_kind=GAN_KIND)
    gen = Generator(GANModelConfig.from_dict(payload["config"]["generator"]))
    gen.load_state_dict(payload["state"]["generator"])
    gen.eval()
    vocab = Vocabulary(tokens=list(payload["extra"]["vocab"]))
    return gen, vocab, payload["config"]


def load_recognizer(checkpoint_path) -> tuple[Recognizer, Vocabulary, dict]:
    payload = load_checkpoint(checkpoint_path, expected_kind=Recognizer.KIND)
    model = Recognizer(RecognizerConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state"]["model"])
    model.eval()
    vocab = Vocabulary(tokens=list(payload["extra"]["vocab"]))
    return model, vocab, payload["extra"]


def synthesize_dataset(
    checkpoint_path,
    records: list[FormulaRecord],
    cfg: SynthesisConfig,
    backend: RendererBackend,
    out_dir,
) -> SynthesisStats:
    """Render each formula, translate it to the handwritten domain, and
    write a dataset directory.

    Records whose post-scaling pixel area is not strictly below
    ``max_pixel_area`` are skipped; labels are carried over unchanged.
    """
    gen, vocab, _ = load_generator(checkpoint_path)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    stats = SynthesisStats()
    out_records: list[FormulaRecord] = []
    with torch.no_grad():
        for rec in records:
            seed = record_seed(cfg.seed, rec.id)
            if cfg.sample_render_params:
                params = sample_render_params(np.random.default_rng(seed))
            else:
                params = RenderParams(font=cfg.font, font_size=cfg.font_size, padding=4)
            try:
                img = render(rec.source_latex, params, backend)
            except RenderFailure:
                stats.failed_render += 1
                continue
            img = resize_to_height(img, cfg.input_height)
            h, w = img.shape
            if not area_within_limit(h, w, cfg.max_pixel_area):
                stats.skipped_area += 1
                continue
            padded = pad_width_to_multiple(img, 16)
            zgen = torch.Generator().manual_seed(seed % 2**63)
            z = torch.randn(1, gen.cfg.z_dim, generator=zgen)
            target = torch.tensor([1], dtype=torch.long)  # handwritten class
            fake = gen(torch.from_numpy(padded).unsqueeze(0).unsqueeze(0), z, target)
            synth = normalize_intensity(fake[0, 0, :, :w].numpy())
            name = f"images/{rec.id}.png"
            save_png(synth, out / name)
            out_records.append(
                FormulaRecord(
                    id=rec.id,
                    source_latex=rec.source_latex,
                    tokens=list(rec.tokens),
                    domain=HANDWRITTEN,
                    image_path=name,
                    height=int(synth.shape[0]),
                    width=int(synth.shape[1]),
                )
            )
            stats.accepted += 1
    write_manifest(out_records, out, vocab)
    return stats


# ---------------------------------------------------------------------------
# Recognizer training
# ---------------------------------------------------------------------------


class PlateauScheduler:
    """Divide the lr by ``factor`` after ``patience`` epochs without
    improvement; fires once per plateau (the stale counter resets)."""

    def __init__(self, optimizer, factor: float, patience: int, min_delta: float = 0.0):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.stale = 0
        self.events: list[int] = []
        self._epoch = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> bool:
        self._epoch += 1
        if metric > self.best + self.min_delta:
            self.best = metric
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] /= self.factor
            self.stale = 0
            self.events.append(self._epoch)
            return True
        return False


def normalization_height_rule(mode: str, symbol_font_size: int = 32):
    """Pixel-height rule for the two evaluation-time resize modes.

    ``height-128`` is the fixed GAN training height.  ``symbol-height``
    scales every image to the height its formula occupies when rendered at
    one fixed font size, which keeps individual symbols at roughly equal
    size regardless of formula depth.
    """
    if mode == "height-128":
        return 128
    stub = StubRenderer()
    params = RenderParams(font="mathrm", padding=0, font_size=symbol_font_size)

    def rule(rec: FormulaRecord) -> int:
        try:
            h = stub.render(rec.source_latex, params).shape[0]
        except RenderError:
            return 128
        return int(min(max(h, 16), 512))

    return rule


def evaluate_exprate(model: Recognizer, dataset: TrainingSet, beam_size: int = 1, max_len: int | None = None) -> float:
    """Exact-match percentage over a training set via beam decoding."""
    model.eval()
    exact = 0
    for rec, img in zip(dataset.records, dataset.images):
        result = model.beam_search(torch.from_numpy(img), beam_size=beam_size, max_len=max_len)
        truth = dataset.vocab.encode(rec.tokens)
        if result.output_ids == truth:
            exact += 1
    return 100.0 * exact / len(dataset)


def train_recognizer(
    train_dirs: list,
    val_dir,
    cfg: RecTrainConfig,
    out_dir,
    stop_exprate: float | None = None,
    eval_every_steps: int | None = None,
) -> dict:
    """SGD-with-momentum recognizer training over an equal mix of datasets.

    Validation ExpRate is logged per epoch (or every ``eval_every_steps``),
    the plateau scheduler divides the lr by the configured factor when it
    stalls, and the best-ExpRate checkpoint is retained.
    """
    if not train_dirs:
        raise EmptyDataset("no training datasets given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)

    height_for = normalization_height_rule(cfg.normalize_mode, cfg.symbol_font_size)
    sets = [load_training_set(d, height_for, cfg.max_width, cfg.max_tokens) for d in train_dirs]
    vocab = sets[0].vocab
    val_set = load_training_set(val_dir, height_for, cfg.max_width, cfg.max_tokens, vocab=vocab)

    torch.manual_seed(cfg.seed)
    model = Recognizer(_task_config(cfg.model_preset, len(vocab)))
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    scheduler = PlateauScheduler(optimizer, factor=cfg.lr_decay_factor, patience=cfg.plateau_patience)
    rng = np.random.default_rng(cfg.seed)
    sampler = EqualMixSampler(sets, rng)
    augment_domains = frozenset([RENDERED, HANDWRITTEN]) if cfg.augment else frozenset()

    best = {"exprate": -1.0, "path": str(out / "recognizer_best.ckpt")}
    history: list[dict] = []
    metrics_path = out / "metrics.csv"
    step = 0
    stop = False

    def _evaluate_and_track() -> float:
        exprate = evaluate_exprate(model, val_set, beam_size=cfg.eval_beam_size)
        if exprate > best["exprate"]:
            best["exprate"] = exprate
            save_checkpoint(
                best["path"],
                kind=Recognizer.KIND,
                config=model.cfg.to_dict(),
                state={"model": model.state_dict()},
                extra={"vocab": list(vocab.tokens), "exprate": exprate, "normalize_mode": cfg.normalize_mode},
            )
        return exprate

    with metrics_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "train_loss", "val_exprate", "lr"])
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            epoch_loss = 0.0
            for _ in range(cfg.steps_per_epoch):
                batch = assemble_batch(
                    sets, sampler.picks(cfg.batch_size), vocab, rng=rng,
                    augment_domains=augment_domains, max_width=cfg.max_width,
                )
                logits = model.teacher_forced_logits(batch.images, batch.targets, batch.extents)
                loss = batch_task_loss(logits, batch.targets)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                epoch_loss += loss.detach().item()
                step += 1
                if eval_every_steps and step % eval_every_steps == 0 and stop_exprate is not None:
                    if _evaluate_and_track() >= stop_exprate:
                        stop = True
                        break
                model.train()
            exprate = _evaluate_and_track()
            scheduler.step(exprate)
            history.append(
                {"epoch": epoch, "step": step, "train_loss": epoch_loss / max(1, cfg.steps_per_epoch),
                 "val_exprate": exprate, "lr": scheduler.lr}
            )
            writer.writerow([epoch, step, history[-1]["train_loss"], exprate, scheduler.lr])
            if stop or (stop_exprate is not None and exprate >= stop_exprate):
                stop = True
                break

    return {
        "best_checkpoint": best["path"],
        "best_exprate": best["exprate"],
        "history": history,
        "metrics": str(metrics_path),
        "lr_events": scheduler.events,
        "steps": step,
        "stopped_early": stop,
    }
