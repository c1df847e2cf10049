"""Image-to-token-sequence recognizer.

A densely connected convolutional encoder feeds a GRU decoder with
additive attention.  The same architecture serves two roles: a small
preset trained jointly with the GAN to keep generated symbols legible,
and a larger standalone preset for recognition experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Vocabulary

__all__ = [
    "ImageTooSmall",
    "LengthMismatch",
    "RecognizerConfig",
    "DenseEncoder",
    "AttentionDecoder",
    "DecoderState",
    "Recognizer",
    "task_loss",
    "batch_task_loss",
    "BeamHypothesis",
    "BeamResult",
]

PAD_ID = Vocabulary.pad_id
SOS_ID = Vocabulary.sos_id
EOS_ID = Vocabulary.eos_id


class ImageTooSmall(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RecognizerConfig:
    vocab_size: int
    num_blocks: int = 3
    layers_per_block: int = 6
    growth_rate: int = 24
    multiscale: bool = False
    stem_channels: int = 48
    embed_dim: int = 256
    hidden_dim: int = 256
    attention_dim: int = 256
    max_len: int = 200

    @classmethod
    def small(cls, vocab_size: int) -> "RecognizerConfig":
        """GAN task-model preset: 3 blocks of 6 layers, growth rate 24."""
        return cls(vocab_size=vocab_size)

    @classmethod
    def large(cls, vocab_size: int) -> "RecognizerConfig":
        """Standalone recognizer: deeper blocks, two feature scales."""
        return cls(vocab_size=vocab_size, layers_per_block=16, multiscale=True, hidden_dim=512)

    @classmethod
    def tiny(cls, vocab_size: int) -> "RecognizerConfig":
        """CPU smoke-test preset."""
        return cls(
            vocab_size=vocab_size,
            num_blocks=2,
            layers_per_block=2,
            growth_rate=8,
            stem_channels=16,
            embed_dim=32,
            hidden_dim=48,
            attention_dim=32,
            max_len=40,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RecognizerConfig":
        return cls(**d)


class _DenseLayer(nn.Module):
    def __init__(self, c_in: int, growth: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(c_in)
        self.conv = nn.Conv2d(c_in, growth, 3, padding=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([x, self.conv(F.relu(self.norm(x)))], dim=1)


class _Transition(nn.Module):
    """Halves both channel count and spatial dims between dense blocks."""

    def __init__(self, c_in: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(c_in)
        self.conv = nn.Conv2d(c_in, c_in // 2, 1, bias=False)
        self.out_channels = c_in // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(self.conv(F.relu(self.norm(x))), 2, ceil_mode=True)


class DenseEncoder(nn.Module):
    """DenseNet-style feature extractor.

    Stem: 7x7 stride-2 convolution plus 2x2 max pool.  Each block stacks
    ``layers_per_block`` layers that concatenate ``growth_rate`` new
    channels; transitions between blocks halve channels and resolution.
    With ``multiscale`` a second feature map is tapped before the last
    transition (one halving less), giving the decoder a finer grid for
    small symbols.
    """

    MIN_INPUT = 16

    def __init__(self, cfg: RecognizerConfig):
        super().__init__()
        self.cfg = cfg
        self.stem_conv = nn.Conv2d(1, cfg.stem_channels, 7, stride=2, padding=3, bias=False)
        self.stem_norm = nn.BatchNorm2d(cfg.stem_channels)

        blocks = []
        transitions = []
        plan = []
        channels = cfg.stem_channels
        for b in range(cfg.num_blocks):
            layers = []
            block_in = channels
            for _ in range(cfg.layers_per_block):
                layers.append(_DenseLayer(channels, cfg.growth_rate))
                channels += cfg.growth_rate
            blocks.append(nn.Sequential(*layers))
            plan.append({"block": b, "in_channels": block_in, "out_channels": channels})
            if b < cfg.num_blocks - 1:
                tr = _Transition(channels)
                transitions.append(tr)
                channels = tr.out_channels
        self.blocks = nn.ModuleList(blocks)
        self.transitions = nn.ModuleList(transitions)
        self._plan = plan
        self.out_channels = channels
        self.final_norm = nn.BatchNorm2d(channels)

        if cfg.multiscale:
            # Tap the grid entering the last transition: same content, one
            # halving less.
            pre = plan[-2]["out_channels"] if cfg.num_blocks >= 2 else cfg.stem_channels
            self.branch_norm = nn.BatchNorm2d(pre)
            self.branch_conv = nn.Conv2d(pre, pre // 2, 1, bias=False)
            self.branch_channels = pre // 2
        else:
            self.branch_channels = 0

    def layer_plan(self) -> list[dict]:
        """Per-block channel accounting used by the structural tests."""
        return [dict(p) for p in self._plan]

    @property
    def reduction(self) -> int:
        """Total spatial downscale of the deepest feature grid."""
        return 4 * 2 ** (self.cfg.num_blocks - 1)

    def feature_extent(self, pixels: int, scale_halvings: int | None = None) -> int:
        """Feature-grid extent for an input extent, following each stage's
        own rounding (stride-2 conv then ceil-mode pools)."""
        n = scale_halvings if scale_halvings is not None else self.cfg.num_blocks + 1
        e = (pixels - 1) // 2 + 1  # 7x7 stride-2 conv, padding 3
        for _ in range(n - 1):
            e = math.ceil(e / 2)
        return e

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Return feature grids (deepest first); each is (B, C, H', W')."""
        if images.dim() != 4 or images.shape[1] != 1:
            raise ImageTooSmall(f"expected (B,1,H,W) images, got {tuple(images.shape)}")
        if min(images.shape[2], images.shape[3]) < self.MIN_INPUT:
            raise ImageTooSmall(f"input spatial dims must be >= {self.MIN_INPUT}, got {tuple(images.shape[2:])}")
        x = F.max_pool2d(F.relu(self.stem_norm(self.stem_conv(images))), 2, ceil_mode=True)
        branch = None
        for b, block in enumerate(self.blocks):
            x = block(x)
            if b < len(self.transitions):
                if self.cfg.multiscale and b == len(self.transitions) - 1:
                    branch = self.branch_conv(F.relu(self.branch_norm(x)))
                x = self.transitions[b](x)
        out = [F.relu(self.final_norm(x))]
        if branch is not None:
            out.append(branch)
        return out


@dataclass
class DecoderState:
    """Recurrent decoder state threaded through decode steps."""

    hidden: torch.Tensor  # (B, hidden_dim)
    prev_token: torch.Tensor  # (B,) int64
    context: torch.Tensor  # (B, context_dim)


class _AdditiveAttention(nn.Module):
    def __init__(self, feat_dim: int, query_dim: int, att_dim: int):
        super().__init__()
        self.key = nn.Linear(feat_dim, att_dim)
        self.query = nn.Linear(query_dim, att_dim, bias=False)
        self.score = nn.Linear(att_dim, 1, bias=False)

    def forward(self, query, feats, mask):
        # feats: (B, N, C); mask: (B, N) boolean, True where attendable
        energy = self.score(torch.tanh(self.key(feats) + self.query(query).unsqueeze(1))).squeeze(-1)
        if mask is not None:
            energy = energy.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(energy, dim=1)
        context = torch.bmm(alpha.unsqueeze(1), feats).squeeze(1)
        return context, alpha


class AttentionDecoder(nn.Module):
    """GRU decoder with additive attention over one or two feature grids."""

    def __init__(self, cfg: RecognizerConfig, feat_dims: list[int]):
        super().__init__()
        self.cfg = cfg
        self.context_dim = sum(feat_dims)
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim, padding_idx=PAD_ID)
        self.gru = nn.GRUCell(cfg.embed_dim + self.context_dim, cfg.hidden_dim)
        self.attentions = nn.ModuleList(
            _AdditiveAttention(fd, cfg.hidden_dim, cfg.attention_dim) for fd in feat_dims
        )
        self.init_hidden = nn.Linear(feat_dims[0], cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim + self.context_dim, cfg.vocab_size)

    def initial_state(self, feats: torch.Tensor, mask: torch.Tensor | None) -> DecoderState:
        """Hidden state from mean-pooled deepest features, empty context."""
        if mask is None:
            pooled = feats.mean(dim=1)
        else:
            weights = mask.float()
            pooled = (feats * weights.unsqueeze(-1)).sum(1) / weights.sum(1, keepdim=True).clamp(min=1.0)
        b = feats.shape[0]
        hidden = torch.tanh(self.init_hidden(pooled))
        prev = torch.full((b,), SOS_ID, dtype=torch.long, device=feats.device)
        context = feats.new_zeros(b, self.context_dim)
        return DecoderState(hidden=hidden, prev_token=prev, context=context)

    def step(self, state: DecoderState, feature_grids, masks=None):
        """One decode step; returns (logits, new state, attention weights)."""
        if masks is None:
            masks = [None] * len(feature_grids)
        emb = self.embed(state.prev_token)
        hidden = self.gru(torch.cat([emb, state.context], dim=1), state.hidden)
        contexts, alphas = [], []
        for att, feats, mask in zip(self.attentions, feature_grids, masks):
            ctx, alpha = att(hidden, feats, mask)
            contexts.append(ctx)
            alphas.append(alpha)
        context = torch.cat(contexts, dim=1)
        logits = self.out(torch.cat([hidden, context], dim=1))
        new_state = DecoderState(hidden=hidden, prev_token=state.prev_token, context=context)
        return logits, new_state, alphas


@dataclass(frozen=True)
class BeamHypothesis:
    """Partial decode: token ids starting at SOS, accumulated log-prob."""

    token_ids: tuple[int, ...]
    log_prob: float
    finished: bool

    def sort_key(self):
        # Higher score first; ties broken lexicographically for determinism.
        return (-self.log_prob, self.token_ids)


@dataclass(frozen=True)
class BeamResult:
    token_ids: tuple[int, ...]
    log_prob: float
    finished: bool

    @property
    def output_ids(self) -> list[int]:
        ids = list(self.token_ids[1:])
        if ids and ids[-1] == EOS_ID:
            ids = ids[:-1]
        return ids


class Recognizer(nn.Module):
    """Encoder-decoder wrapper with training, scoring, and decoding entry points."""

    KIND = "recognizer"

    def __init__(self, cfg: RecognizerConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = DenseEncoder(cfg)
        feat_dims = [self.encoder.out_channels]
        if cfg.multiscale:
            feat_dims.append(self.encoder.branch_channels)
        self.decoder = AttentionDecoder(cfg, feat_dims)

    # -- features -----------------------------------------------------------

    def encode(self, images: torch.Tensor, extents: list[tuple[int, int]] | None = None):
        """Flatten encoder grids to (B, N, C) plus padding masks.

        ``extents`` holds each sample's true (height, width) in pixels; grid
        positions arising purely from batch padding are masked out.
        """
        grids = self.encoder(images)
        feats, masks = [], []
        halvings = self.cfg.num_blocks + 1
        for s, grid in enumerate(grids):
            b, c, h, w = grid.shape
            feats.append(grid.flatten(2).transpose(1, 2))
            if extents is None:
                masks.append(None)
            else:
                fh = torch.tensor([self.encoder.feature_extent(e[0], halvings - s) for e in extents])
                fw = torch.tensor([self.encoder.feature_extent(e[1], halvings - s) for e in extents])
                row = torch.arange(h).view(1, h, 1)
                col = torch.arange(w).view(1, 1, w)
                keep = (row < fh.view(b, 1, 1)) & (col < fw.view(b, 1, 1))
                masks.append(keep.reshape(b, h * w).to(grid.device))
        return feats, masks

    # -- training -----------------------------------------------------------

    def teacher_forced_logits(self, images, targets, extents=None):
        """Logits for each target position given ground-truth history.

        ``targets`` is (B, T) of token ids ending in EOS then PAD.  The
        decoder input at step t is targets[:, t-1] (SOS at t=0).
        """
        feats, masks = self.encode(images, extents)
        state = self.decoder.initial_state(feats[0], masks[0])
        logits = []
        for t in range(targets.shape[1]):
            step_logits, state, _ = self.decoder.step(state, feats, masks)
            logits.append(step_logits)
            state.prev_token = targets[:, t]
        return torch.stack(logits, dim=1)

    def sequence_nll(self, images, targets, extents=None) -> tuple[torch.Tensor, int]:
        """Total teacher-forced negative log-likelihood and token count
        (PAD excluded) over a batch; the perplexity building block."""
        logits = self.teacher_forced_logits(images, targets, extents)
        flat = logits.reshape(-1, logits.shape[-1])
        tgt = targets.reshape(-1)
        nll = F.cross_entropy(flat, tgt, ignore_index=PAD_ID, reduction="sum")
        return nll, int((tgt != PAD_ID).sum())

    # -- decoding -------------------------------------------------------------

    @torch.no_grad()
    def greedy_decode(self, image: torch.Tensor, max_len: int | None = None) -> BeamResult:
        return self.beam_search(image, beam_size=1, max_len=max_len)

    @torch.no_grad()
    def beam_search(self, image: torch.Tensor, beam_size: int = 10, max_len: int | None = None) -> BeamResult:
        """Highest-sum-of-log-probs finished hypothesis.

        Scores are unnormalized log-prob sums; ties break lexicographically
        on token ids.  If nothing finishes within ``max_len`` steps the best
        unfinished hypothesis is returned with ``finished=False``.
        """
        if beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        max_len = max_len or self.cfg.max_len
        if image.dim() == 2:
            image = image.unsqueeze(0).unsqueeze(0)
        elif image.dim() == 3:
            image = image.unsqueeze(0)
        feats, masks = self.encode(image)
        state = self.decoder.initial_state(feats[0], masks[0])

        active: list[tuple[BeamHypothesis, DecoderState]] = [
            (BeamHypothesis((SOS_ID,), 0.0, False), state)
        ]
        finished: list[BeamHypothesis] = []
        for _ in range(max_len):
            candidates: list[tuple[BeamHypothesis, DecoderState]] = []
            for hyp, st in active:
                logits, new_st, _ = self.decoder.step(st, feats, masks)
                log_probs = F.log_softmax(logits.squeeze(0), dim=-1)
                top = torch.topk(log_probs, k=min(beam_size, log_probs.shape[0]))
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    nxt = BeamHypothesis(hyp.token_ids + (tok,), hyp.log_prob + lp, tok == EOS_ID)
                    st_tok = DecoderState(new_st.hidden, torch.tensor([tok]), new_st.context)
                    candidates.append((nxt, st_tok))
            candidates.sort(key=lambda c: c[0].sort_key())
            active = []
            for hyp, st in candidates:
                if hyp.finished:
                    finished.append(hyp)
                elif len(active) < beam_size:
                    active.append((hyp, st))
            if not active:
                break

        if finished:
            best = min(finished, key=lambda h: h.sort_key())
            return BeamResult(best.token_ids, best.log_prob, True)
        best = min((h for h, _ in active), key=lambda h: h.sort_key())
        return BeamResult(best.token_ids, best.log_prob, False)


def task_loss(preds, truth_ids) -> torch.Tensor:
    """Sequence cross entropy: -sum_t log p_t(truth_t), PAD positions skipped.

    ``preds`` holds one probability distribution per time step.
    """
    if not torch.is_tensor(preds):
        preds = torch.stack([torch.as_tensor(p) for p in preds])
    truth = torch.as_tensor(truth_ids, dtype=torch.long)
    if preds.shape[0] != truth.shape[0]:
        raise LengthMismatch(f"{preds.shape[0]} predictions vs {truth.shape[0]} targets")
    keep = truth != PAD_ID
    if not bool(keep.any()):
        return preds.new_zeros(())
    probs = preds[keep, truth[keep]]
    return -torch.log(probs).sum()


def batch_task_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of per-sequence summed cross entropy (from logits)."""
    flat = logits.reshape(-1, logits.shape[-1])
    nll = F.cross_entropy(flat, targets.reshape(-1), ignore_index=PAD_ID, reduction="sum")
    return nll / logits.shape[0]
