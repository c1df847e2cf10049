"""Architecture-comparison harness.

For each GAN variant and checkpoint iteration: train the GAN, synthesize a
handwritten-style dataset from rendered formulas, train a fresh probe
recognizer on only the synthesized images, and score its perplexity on a
held-out handwritten set.  Variants whose synthesized output stays legible
get low perplexity, so the table ranks training configurations.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .config import GANTrainConfig, RecTrainConfig, SynthesisConfig
from .corpus import FormulaRecord
from .data import load_training_set
from .metrics import perplexity
from .rendering import RendererBackend
from .reporting import write_ablation_outputs
from .training import load_recognizer, normalization_height_rule, synthesize_dataset, train_gan, train_recognizer

__all__ = ["ablation_run"]


def ablation_run(
    variants: list[tuple[str, GANTrainConfig]],
    iterations: list[int],
    rendered_dir,
    handwritten_dir,
    eval_dir,
    synth_records: list[FormulaRecord],
    backend: RendererBackend,
    workdir,
    probe_cfg: RecTrainConfig | None = None,
    synthesis_cfg: SynthesisConfig | None = None,
) -> dict:
    """Produce the (variant x iteration) -> perplexity table plus files."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    probe_cfg = probe_cfg or RecTrainConfig(model_preset="tiny", epochs=2, steps_per_epoch=50, augment=False)
    table: dict[tuple[str, int], float] = {}

    for name, cfg in variants:
        cfg = dataclasses.replace(cfg, checkpoint_iterations=sorted(set(iterations)))
        gan_dir = workdir / f"gan_{name}"
        result = train_gan(cfg, rendered_dir, handwritten_dir, gan_dir)
        for it in iterations:
            ckpt = result["checkpoints"][it]
            synth_dir = workdir / f"synth_{name}_{it}"
            syn_cfg = synthesis_cfg or SynthesisConfig(input_height=cfg.input_height, seed=cfg.seed)
            synthesize_dataset(ckpt, synth_records, syn_cfg, backend, synth_dir)
            probe_dir = workdir / f"probe_{name}_{it}"
            probe = train_recognizer([str(synth_dir)], eval_dir, probe_cfg, probe_dir)
            model, vocab, _ = load_recognizer(probe["best_checkpoint"])
            rule = normalization_height_rule(probe_cfg.normalize_mode, probe_cfg.symbol_font_size)
            eval_set = load_training_set(eval_dir, rule, probe_cfg.max_width, probe_cfg.max_tokens, vocab=vocab)
            table[(name, it)] = perplexity(model, eval_set)

    names = [name for name, _ in variants]
    meta = {name: dataclasses.asdict(cfg) for name, cfg in variants}
    files = write_ablation_outputs(names, list(iterations), table, workdir, meta=meta)
    return {"table": table, "variants": names, "iterations": list(iterations), "files": files}
