"""Memory-evolution segmentation pipeline.

A query frame plus its mask seed a memory bank. Each stage fuses the bank
into per-frame features with cross-attention, enhances the clip with a
spatio-temporal self-attention block, and decodes three mask candidates per
frame (mask logits, a predicted-IoU score, an occlusion score). Non-final
stages mine high-confidence target masks and confusable distractor masks
from the candidates, re-encode them as memory entries, and fuse them with
the original query memory under learned softmax importance weights to form
the next stage's bank. The final stage emits one mask per frame, gated on
the occlusion score.

Memory entries carry a scalar importance weight. Attention aggregates each
entry's contribution weighted by that scalar in both the softmax numerator
and denominator, so an entry weighted zero drops out exactly and halving a
duplicated entry's weight reproduces the original output.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionParams, Tensor
from .masks import RleMask, ResponseSet, group_into_masklets, mask_iou, rle_encode
from .optim import ParamStore, seeded_init

KIND_QUERY_INIT = "query_init"
KIND_TARGET = "target"
KIND_DISTRACTOR = "distractor"
ENTRY_KINDS = (KIND_QUERY_INIT, KIND_TARGET, KIND_DISTRACTOR)

NUM_CANDIDATES = 3  # fixed candidate count per frame


class PipelineConfigError(ValueError):
    """Raised for invalid pipeline configuration."""


@dataclass(frozen=True)
class PipelineConfig:
    num_stages: int = 2                        # K
    clip_len: int = 7                          # L
    num_candidates: int = NUM_CANDIDATES       # H, fixed
    num_targets: int = 2                       # n_t
    num_distractors: int = 1                   # n_d
    tau_target: float = 0.5
    tau_divergence: float = 0.5
    tau_score: float = 0.7
    patch_size: int = 8
    model_dim: int = 32
    num_heads: int = 2
    stage_weights: tuple[float, ...] = (0.5, 1.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_stages < 1:
            raise PipelineConfigError("num_stages must be >= 1")
        if self.clip_len < 1:
            raise PipelineConfigError("clip_len must be >= 1")
        if self.num_candidates != NUM_CANDIDATES:
            raise PipelineConfigError(f"num_candidates is fixed at {NUM_CANDIDATES}")
        if self.num_targets < 0 or self.num_distractors < 0:
            raise PipelineConfigError("selection counts must be non-negative")
        for name in ("tau_target", "tau_divergence", "tau_score"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise PipelineConfigError(f"{name} must lie in [0, 1], got {value}")
        if len(self.stage_weights) != self.num_stages:
            raise PipelineConfigError(
                f"{len(self.stage_weights)} stage weights for {self.num_stages} stages"
            )
        if self.patch_size < 1:
            raise PipelineConfigError("patch_size must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise PipelineConfigError("model_dim must be divisible by num_heads")
        if self.model_dim % 2 != 0:
            raise PipelineConfigError("model_dim must be even")

    @property
    def reduce_dim(self) -> int:
        return max(1, self.model_dim // 2)


def config_digest(cfg: PipelineConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# --- Parameters ----------------------------------------------------------------


def param_shapes(cfg: PipelineConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.model_dim
    p = cfg.patch_size
    h = NUM_CANDIDATES
    dr = cfg.reduce_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (p * p * 3, d),
        "patch_embed.b": (d,),
        "mem_enc.w": (d + 1, d),
        "mem_enc.b": (d,),
        "dec_mask.w": (d, h),
        "dec_mask.b": (h,),
        "dec_score.w1": (d, d),
        "dec_score.b1": (d,),
        "dec_score.w2": (d, 2 * h),
        "dec_score.b2": (2 * h,),
        "amg_target.w1": (d, d),
        "amg_target.b1": (d,),
        "amg_target.w2": (d, dr),
        "amg_target.b2": (dr,),
        "amg_distractor.w1": (d, d),
        "amg_distractor.b1": (d,),
        "amg_distractor.w2": (d, dr),
        "amg_distractor.b2": (dr,),
        "amg_head3.w1": (d + 2 * dr, d),
        "amg_head3.b1": (d,),
        "amg_head3.w2": (d, 3),
        "amg_head3.b2": (3,),
        "amg_head2.w1": (d + dr, d),
        "amg_head2.b1": (d,),
        "amg_head2.w2": (d, 2),
        "amg_head2.b2": (2,),
    }
    for block in ("mem_attn", "stt_attn"):
        for proj in ("q", "k", "v", "o"):
            shapes[f"{block}.w{proj}"] = (d, d)
    for name, shape in (("w1", (d, d)), ("b1", (d,)), ("w2", (d, d)), ("b2", (d,))):
        shapes[f"stt_mlp.{name}"] = shape
    return shapes


def init_params(cfg: PipelineConfig) -> ParamStore:
    return seeded_init(param_shapes(cfg), cfg.seed)


def _attention_params(store: ParamStore, prefix: str) -> AttentionParams:
    return AttentionParams(
        wq=store[f"{prefix}.wq"], wk=store[f"{prefix}.wk"],
        wv=store[f"{prefix}.wv"], wo=store[f"{prefix}.wo"],
    )


def _mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    hidden = ad.tanh(ad.linear(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"]))
    return ad.linear(hidden, store[f"{prefix}.w2"], store[f"{prefix}.b2"])


# --- Frame and memory encoding ---------------------------------------------------


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(num_tokens: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding over flattened grid positions."""
    key = (num_tokens, dim)
    if key not in _PE_CACHE:
        pos = np.arange(num_tokens, dtype=np.float64)[:, None]
        idx = np.arange((dim + 1) // 2, dtype=np.float64)[None, :]
        angles = pos / np.power(10000.0, 2.0 * idx / dim)
        pe = np.zeros((num_tokens, 2 * angles.shape[1]), dtype=np.float64)
        pe[:, 0::2] = np.sin(angles)
        pe[:, 1::2] = np.cos(angles)
        _PE_CACHE[key] = pe[:, :dim]
    return _PE_CACHE[key]


def feature_grid(frame_hw: tuple[int, int], patch_size: int) -> tuple[int, int]:
    h, w = frame_hw
    if h % patch_size or w % patch_size:
        raise PipelineConfigError(
            f"frame size {h}x{w} is not divisible by patch size {patch_size}"
        )
    return h // patch_size, w // patch_size


def _patchify(frame: np.ndarray, patch_size: int) -> np.ndarray:
    """uint8 HxWx3 frame -> (grid_h*grid_w, patch*patch*3) float64 in [0, 1]."""
    h, w, _ = frame.shape
    gh, gw = feature_grid((h, w), patch_size)
    x = frame.astype(np.float64) / 255.0
    x = x.reshape(gh, patch_size, gw, patch_size, 3)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, patch_size * patch_size * 3)


def encode_frame(frame: np.ndarray, cfg: PipelineConfig, params: ParamStore) -> Tensor:
    """Patch flattening + linear projection + fixed positional term.

    Returns row-major grid tokens of shape (grid_h*grid_w, model_dim).
    """
    patches = ad.tensor(_patchify(frame, cfg.patch_size))
    projected = ad.linear(patches, params["patch_embed.w"], params["patch_embed.b"])
    pe = ad.tensor(positional_encoding(patches.value.shape[0], cfg.model_dim))
    return ad.add(projected, pe)


def mask_patch_fractions(mask: RleMask, patch_size: int) -> np.ndarray:
    """Per-patch foreground fraction on the feature grid."""
    from .masks import rle_decode

    gh, gw = feature_grid(mask.shape, patch_size)
    grid = rle_decode(mask).astype(np.float64)
    return grid.reshape(gh, patch_size, gw, patch_size).mean(axis=(1, 3))


@dataclass
class MemoryEntry:
    """One bank entry: encoded tokens, its role, and its importance weight."""

    tokens: Tensor
    kind: str
    scale: Tensor

    def __post_init__(self) -> None:
        if self.kind not in ENTRY_KINDS:
            raise PipelineConfigError(f"unknown memory entry kind {self.kind!r}")


def unit_scale() -> Tensor:
    return ad.tensor(1.0)


@dataclass
class MemoryBank:
    entries: tuple[MemoryEntry, ...]

    def __post_init__(self) -> None:
        self.entries = tuple(self.entries)
        if not any(e.kind == KIND_QUERY_INIT for e in self.entries):
            raise PipelineConfigError("memory bank must contain a query_init entry")

    def query_init(self) -> MemoryEntry:
        return next(e for e in self.entries if e.kind == KIND_QUERY_INIT)

    def of_kind(self, kind: str) -> list[MemoryEntry]:
        return [e for e in self.entries if e.kind == kind]


def encode_memory(
    features: Tensor,
    mask: RleMask,
    cfg: PipelineConfig,
    params: ParamStore,
    kind: str = KIND_QUERY_INIT,
) -> MemoryEntry:
    """Fuse a frame's tokens with its mask's patch-fraction channel."""
    n = features.value.shape[0]
    fractions = mask_patch_fractions(mask, cfg.patch_size).reshape(n, 1)
    joined = ad.concat([features, ad.tensor(fractions)], axis=1)
    tokens = ad.linear(joined, params["mem_enc.w"], params["mem_enc.b"])
    return MemoryEntry(tokens=tokens, kind=kind, scale=unit_scale())


def memory_attention(
    features: Tensor,
    bank: MemoryBank,
    cfg: PipelineConfig,
    params: ParamStore,
) -> Tensor:
    """Cross-attention from frame tokens onto the weighted memory bank.

    Each entry's exp-scores and value rows are multiplied by its scalar weight
    in both the numerator and the normalizer; entries with weight exactly zero
    are skipped, so they cannot perturb the result even at the last bit.
    """
    if not bank.entries:
        raise PipelineConfigError("memory bank is empty")
    active = [e for e in bank.entries if float(e.scale.value) != 0.0]
    if not active:
        raise PipelineConfigError("all memory entries have zero scale")
    p = _attention_params(params, "mem_attn")
    d = cfg.model_dim
    d_head = d // cfg.num_heads
    q = ad.matmul(features, p.wq)
    keys = [ad.matmul(e.tokens, p.wk) for e in active]
    values = [ad.matmul(e.tokens, p.wv) for e in active]
    head_outputs = []
    for h in range(cfg.num_heads):
        qs = ad.scale(ad.narrow(q, 1, h * d_head, d_head), 1.0 / math.sqrt(d_head))
        scores = [ad.matmul(qs, ad.transpose(ad.narrow(k, 1, h * d_head, d_head))) for k in keys]
        # detached per-query shift keeps exp in range without touching gradients
        row_max = np.max(
            np.concatenate([s.value for s in scores], axis=1), axis=1, keepdims=True
        )
        shift = ad.tensor(row_max)
        numerator = None
        denominator = None
        for entry, score, value in zip(active, scores, values):
            vs = ad.narrow(value, 1, h * d_head, d_head)
            weights = ad.exp(ad.subtract(score, shift))
            num_term = ad.multiply(ad.matmul(weights, vs), entry.scale)
            den_term = ad.multiply(ad.sum_axis(weights, 1, keepdims=True), entry.scale)
            numerator = num_term if numerator is None else ad.add(numerator, num_term)
            denominator = den_term if denominator is None else ad.add(denominator, den_term)
        head_outputs.append(ad.divide(numerator, denominator))
    merged = ad.concat(head_outputs, axis=1) if len(head_outputs) > 1 else head_outputs[0]
    projected = ad.matmul(merged, p.wo)
    return ad.add(features, projected)


def stt_block(clip_features: Sequence[Tensor], cfg: PipelineConfig, params: ParamStore) -> list[Tensor]:
    """Self-attention + MLP with residuals over the flattened clip tokens."""
    if not clip_features:
        raise PipelineConfigError("empty clip")
    x = ad.concat(list(clip_features), axis=0) if len(clip_features) > 1 else clip_features[0]
    x = ad.add(x, ad.attention(x, x, x, _attention_params(params, "stt_attn"), cfg.num_heads))
    x = ad.add(x, _mlp(x, params, "stt_mlp"))
    outputs = []
    offset = 0
    for f in clip_features:
        n = f.value.shape[0]
        outputs.append(ad.narrow(x, 0, offset, n) if len(clip_features) > 1 else x)
        offset += n
    return outputs


# --- Candidates -------------------------------------------------------------------


@dataclass
class MaskCandidate:
    """One decoded hypothesis: logits grid plus quality and presence scores."""

    mask_logits: Tensor          # (grid_h, grid_w)
    iou_score: Tensor            # scalar in (0, 1), sigmoid output
    occlusion_score: Tensor      # raw logit; positive means target present

    @property
    def iou(self) -> float:
        return float(self.iou_score.value)

    @property
    def occlusion(self) -> float:
        return float(self.occlusion_score.value)


@dataclass
class FrameCandidates:
    frame_index: int
    candidates: tuple[MaskCandidate, ...]

    def __post_init__(self) -> None:
        self.candidates = tuple(self.candidates)
        if len(self.candidates) != NUM_CANDIDATES:
            raise PipelineConfigError(
                f"expected {NUM_CANDIDATES} candidates, got {len(self.candidates)}"
            )


def decode_masks(
    features: Tensor,
    grid_hw: tuple[int, int],
    cfg: PipelineConfig,
    params: ParamStore,
    frame_index: int = 0,
) -> FrameCandidates:
    """Per-token mask logits and pooled-feature quality scores, three heads."""
    logits_all = ad.linear(features, params["dec_mask.w"], params["dec_mask.b"])
    pooled = ad.mean_axis(features, 0, keepdims=True)
    scores = _mlp(pooled, params, "dec_score")
    candidates = []
    for h in range(NUM_CANDIDATES):
        logits = ad.reshape(ad.narrow(logits_all, 1, h, 1), grid_hw)
        iou = ad.reshape(ad.sigmoid(ad.narrow(scores, 1, 2 * h, 1)), ())
        occ = ad.reshape(ad.narrow(scores, 1, 2 * h + 1, 1), ())
        candidates.append(MaskCandidate(mask_logits=logits, iou_score=iou, occlusion_score=occ))
    return FrameCandidates(frame_index=frame_index, candidates=tuple(candidates))


def binarize_candidate(candidate: MaskCandidate, frame_hw: tuple[int, int]) -> RleMask:
    """Threshold logits at zero, then patch-replicate up to frame resolution."""
    grid = candidate.mask_logits.value > 0
    gh, gw = grid.shape
    h, w = frame_hw
    if h % gh or w % gw:
        raise PipelineConfigError(f"frame {h}x{w} not a multiple of grid {gh}x{gw}")
    up = np.repeat(np.repeat(grid, h // gh, axis=0), w // gw, axis=1)
    return rle_encode(up.astype(np.uint8))


def _argmax_first(values: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


def best_candidate_index(frame: FrameCandidates) -> int:
    return _argmax_first([c.iou for c in frame.candidates])


# --- Selection --------------------------------------------------------------------


@dataclass(frozen=True)
class SelectedCandidate:
    """Provenance of one mined memory entry."""

    frame_index: int
    candidate_index: int
    iou_score: float
    divergence: Optional[float]
    rank_score: float

    def as_dict(self) -> dict:
        out = {
            "frame": self.frame_index,
            "candidate": self.candidate_index,
            "iou": round(self.iou_score, 6),
            "rank": round(self.rank_score, 6),
        }
        if self.divergence is not None:
            out["divergence"] = round(self.divergence, 6)
        return out


def tfg_select(
    stage_candidates: Sequence[FrameCandidates],
    clip_features: Sequence[Tensor],
    frame_hw: tuple[int, int],
    cfg: PipelineConfig,
    params: ParamStore,
) -> tuple[list[MemoryEntry], list[SelectedCandidate]]:
    """Mine up to n_t confident target masks and encode them as memory.

    Per frame the best candidate by predicted IoU survives (first index wins
    ties); those below tau_target are dropped; the rest rank by score with
    lower frame index breaking ties.
    """
    per_frame = []
    for local_idx, frame in enumerate(stage_candidates):
        cand_idx = best_candidate_index(frame)
        cand = frame.candidates[cand_idx]
        if cand.iou >= cfg.tau_target:
            per_frame.append((local_idx, cand_idx, cand))
    per_frame.sort(key=lambda item: (-item[2].iou, item[0]))
    entries: list[MemoryEntry] = []
    provenance: list[SelectedCandidate] = []
    for local_idx, cand_idx, cand in per_frame[: cfg.num_targets]:
        mask = binarize_candidate(cand, frame_hw)
        entries.append(encode_memory(clip_features[local_idx], mask, cfg, params, KIND_TARGET))
        provenance.append(
            SelectedCandidate(
                frame_index=stage_candidates[local_idx].frame_index,
                candidate_index=cand_idx,
                iou_score=cand.iou,
                divergence=None,
                rank_score=cand.iou,
            )
        )
    return entries, provenance


def dfg_select(
    stage_candidates: Sequence[FrameCandidates],
    clip_features: Sequence[Tensor],
    frame_hw: tuple[int, int],
    cfg: PipelineConfig,
    params: ParamStore,
) -> tuple[list[MemoryEntry], list[SelectedCandidate]]:
    """Mine up to n_d confusable alternative masks as distractor memory.

    For each frame's non-best candidates, divergence = 1 - IoU against the
    best candidate's binarized mask. Alternatives qualify with divergence
    strictly above tau_divergence and predicted IoU strictly above tau_score,
    then rank by divergence * IoU (ties: lower frame, lower candidate index).
    An empty selection is valid.
    """
    qualified = []
    for local_idx, frame in enumerate(stage_candidates):
        best_idx = best_candidate_index(frame)
        best_mask = binarize_candidate(frame.candidates[best_idx], frame_hw)
        for cand_idx, cand in enumerate(frame.candidates):
            if cand_idx == best_idx:
                continue
            divergence = 1.0 - mask_iou(best_mask, binarize_candidate(cand, frame_hw))
            if divergence > cfg.tau_divergence and cand.iou > cfg.tau_score:
                qualified.append((local_idx, cand_idx, cand, divergence, divergence * cand.iou))
    qualified.sort(key=lambda item: (-item[4], item[0], item[1]))
    entries: list[MemoryEntry] = []
    provenance: list[SelectedCandidate] = []
    for local_idx, cand_idx, cand, divergence, product in qualified[: cfg.num_distractors]:
        mask = binarize_candidate(cand, frame_hw)
        entries.append(encode_memory(clip_features[local_idx], mask, cfg, params, KIND_DISTRACTOR))
        provenance.append(
            SelectedCandidate(
                frame_index=stage_candidates[local_idx].frame_index,
                candidate_index=cand_idx,
                iou_score=cand.iou,
                divergence=divergence,
                rank_score=product,
            )
        )
    return entries, provenance


# --- Adaptive memory fusion ----------------------------------------------------------


def _pool_entries(entries: Sequence[MemoryEntry], dim: int) -> Tensor:
    """Mean over all tokens of all entries; zeros when the group is empty."""
    if not entries:
        return ad.tensor(np.zeros((1, dim)))
    stacked = (
        ad.concat([e.tokens for e in entries], axis=0) if len(entries) > 1 else entries[0].tokens
    )
    return ad.mean_axis(stacked, 0, keepdims=True)


def amg_fuse(
    init_entry: MemoryEntry,
    targets: Sequence[MemoryEntry],
    distractors: Sequence[MemoryEntry],
    cfg: PipelineConfig,
    params: ParamStore,
) -> MemoryBank:
    """Weight query/target/distractor memory with a learned softmax simplex.

    With no distractors a separate two-slot head weighs query and target
    memory only. With nothing mined at all the untouched query bank returns.
    """
    if not targets and not distractors:
        return MemoryBank((MemoryEntry(init_entry.tokens, KIND_QUERY_INIT, unit_scale()),))
    d = cfg.model_dim
    pooled_init = _pool_entries([init_entry], d)
    target_reduced = _mlp(_pool_entries(targets, d), params, "amg_target")
    if distractors:
        distractor_reduced = _mlp(_pool_entries(distractors, d), params, "amg_distractor")
        joined = ad.concat([pooled_init, target_reduced, distractor_reduced], axis=1)
        logits = _mlp(joined, params, "amg_head3")
    else:
        joined = ad.concat([pooled_init, target_reduced], axis=1)
        logits = _mlp(joined, params, "amg_head2")
    weights = ad.softmax(logits, axis=-1)

    def weight_at(i: int) -> Tensor:
        return ad.reshape(ad.narrow(weights, 1, i, 1), ())

    entries = [MemoryEntry(init_entry.tokens, KIND_QUERY_INIT, weight_at(0))]
    for entry in targets:
        entries.append(MemoryEntry(entry.tokens, KIND_TARGET, weight_at(1)))
    for entry in distractors:
        entries.append(MemoryEntry(entry.tokens, KIND_DISTRACTOR, weight_at(2)))
    return MemoryBank(tuple(entries))


def amg_weights(bank: MemoryBank) -> dict[str, float]:
    """The distinct importance weights by entry kind (for inspection/tests)."""
    out: dict[str, float] = {}
    for entry in bank.entries:
        out.setdefault(entry.kind, float(entry.scale.value))
    return out


# --- Stages and whole-video inference --------------------------------------------------


@dataclass
class StageOutput:
    candidates: tuple[FrameCandidates, ...]
    targets: tuple[SelectedCandidate, ...]
    distractors: tuple[SelectedCandidate, ...]
    new_bank: Optional[MemoryBank]


def run_stage(
    frames: Sequence[np.ndarray],
    bank: MemoryBank,
    cfg: PipelineConfig,
    params: ParamStore,
    is_final: bool,
    frame_offset: int = 0,
) -> StageOutput:
    """One pipeline stage over a clip of at most clip_len frames."""
    if not frames:
        raise PipelineConfigError("empty clip")
    if len(frames) > cfg.clip_len:
        raise PipelineConfigError(f"clip of {len(frames)} frames exceeds clip_len {cfg.clip_len}")
    frame_hw = frames[0].shape[:2]
    grid_hw = feature_grid(frame_hw, cfg.patch_size)
    features = [encode_frame(f, cfg, params) for f in frames]
    attended = [memory_attention(f, bank, cfg, params) for f in features]
    enhanced = stt_block(attended, cfg, params)
    candidates = tuple(
        decode_masks(f, grid_hw, cfg, params, frame_index=frame_offset + i)
        for i, f in enumerate(enhanced)
    )
    if is_final:
        return StageOutput(candidates=candidates, targets=(), distractors=(), new_bank=None)
    target_entries, target_prov = tfg_select(candidates, features, frame_hw, cfg, params)
    distractor_entries, distractor_prov = dfg_select(candidates, features, frame_hw, cfg, params)
    new_bank = amg_fuse(bank.query_init(), target_entries, distractor_entries, cfg, params)
    return StageOutput(
        candidates=candidates,
        targets=tuple(target_prov),
        distractors=tuple(distractor_prov),
        new_bank=new_bank,
    )


def run_clip(
    frames: Sequence[np.ndarray],
    init_entry: MemoryEntry,
    cfg: PipelineConfig,
    params: ParamStore,
    frame_offset: int = 0,
) -> list[StageOutput]:
    """All num_stages stages over one clip, evolving the bank in between."""
    bank = MemoryBank((MemoryEntry(init_entry.tokens, KIND_QUERY_INIT, unit_scale()),))
    outputs: list[StageOutput] = []
    for k in range(cfg.num_stages):
        is_final = k == cfg.num_stages - 1
        out = run_stage(frames, bank, cfg, params, is_final=is_final, frame_offset=frame_offset)
        outputs.append(out)
        if not is_final:
            bank = out.new_bank
    return outputs


def finalize_predictions(
    candidates: Sequence[FrameCandidates],
    frame_hw: tuple[int, int],
) -> list[Optional[RleMask]]:
    """Highest-scoring candidate per frame, emitted only when not occluded."""
    results: list[Optional[RleMask]] = []
    for frame in candidates:
        idx = best_candidate_index(frame)
        cand = frame.candidates[idx]
        if cand.occlusion > 0.0:
            results.append(binarize_candidate(cand, frame_hw))
        else:
            results.append(None)
    return results


def clip_spans(num_frames: int, clip_len: int) -> list[tuple[int, int]]:
    """Consecutive non-overlapping [start, stop) spans of at most clip_len."""
    return [(s, min(s + clip_len, num_frames)) for s in range(0, num_frames, clip_len)]


def infer_video(
    frames: Sequence[np.ndarray],
    query_frame: np.ndarray,
    query_mask: RleMask,
    cfg: PipelineConfig,
    params: ParamStore,
    video_id: str = "video",
) -> tuple[ResponseSet, dict]:
    """Segment all query-object occurrences in a video, clip by clip.

    Returns the assembled response plus a provenance block recording the
    mined target/distractor candidates of every non-final stage.
    """
    if not frames:
        raise PipelineConfigError("video has no frames")
    if query_mask.area() == 0:
        raise PipelineConfigError("query mask is empty")
    frame_hw = frames[0].shape[:2]
    if query_frame.shape[:2] != frame_hw:
        raise PipelineConfigError(
            f"query frame {query_frame.shape[:2]} does not match video frames {frame_hw}"
        )
    if query_mask.shape != frame_hw:
        raise PipelineConfigError(
            f"query mask {query_mask.shape} does not match video frames {frame_hw}"
        )
    query_features = encode_frame(query_frame, cfg, params)
    init_entry = encode_memory(query_features, query_mask, cfg, params, KIND_QUERY_INIT)

    per_frame: list[Optional[RleMask]] = []
    clip_records = []
    for start, stop in clip_spans(len(frames), cfg.clip_len):
        stage_outputs = run_clip(frames[start:stop], init_entry, cfg, params, frame_offset=start)
        per_frame.extend(finalize_predictions(stage_outputs[-1].candidates, frame_hw))
        clip_records.append(
            {
                "start": start,
                "end": stop - 1,
                "stages": [
                    {
                        "targets": [s.as_dict() for s in out.targets],
                        "distractors": [s.as_dict() for s in out.distractors],
                    }
                    for out in stage_outputs[:-1]
                ],
            }
        )
    response = ResponseSet(video_id, group_into_masklets(per_frame))
    provenance = {"config_digest": config_digest(cfg), "seed": cfg.seed, "clips": clip_records}
    return response, provenance
