"""Object-centric condition tokens from instance masks.

Each present object contributes a token concat(z_pos, z_geo): a sinusoidal
encoding of the mask centroid and a learned conv feature of the masked RGB
crop. Absent slots carry a shared learned token so batch shapes stay static.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, EmptyMaskError
from .numerics import DTYPES, RngStream, Tensor, add, concat, matmul, reshape, tensor
from .nnblocks import ConvEncoder, SinusoidalEncoder, sinus_encode

GEO_INPUT_HW = 32


@dataclass
class InstanceMask:
    """Boolean bitmap for one object; object_id is the instruction-argument
    index of the entity and stays stable across an episode."""

    object_id: int
    bitmap: np.ndarray  # [H, W] bool


@dataclass
class ObjectFeature:
    z_pos: Tensor
    z_geo: Tensor
    token: Tensor


class ObjectSet:
    """Fixed-capacity ordered object tokens plus presence flags."""

    def __init__(self, tokens: Tensor, presence: np.ndarray, features=None):
        self.tokens = tokens  # [n_slots, w] (or [B, n_slots, w] for batches)
        self.presence = presence
        self.features = features or []


class FeatureExtractor:
    """The learned mask-to-token map: sinusoidal centroid encoder, conv
    geometric encoder, and the shared absent-slot token."""

    def __init__(self, sinus: SinusoidalEncoder, geo: ConvEncoder, absent: Tensor, n_slots: int, dtype: str):
        self.sinus = sinus
        self.geo = geo
        self.absent = absent
        self.n_slots = n_slots
        self.dtype = dtype
        self.token_width = 2 * sinus.dims_per_scalar + geo.out_dim

    @classmethod
    def create(cls, stream: RngStream, width: int, n_slots: int = 4, dtype: str = "f32"):
        """Token width equals the policy width: half positional, half geometric."""
        pos_dims = width // 4  # per coordinate; two coordinates
        geo_dim = width - 2 * pos_dims
        geo = ConvEncoder.geo_vector(stream, "fphi.geo", geo_dim, dtype)
        absent = tensor(
            (stream.derive("fphi.absent").normal((width,)) * 0.02).astype(DTYPES[dtype]),
            dtype,
            requires_grad=True,
        )
        return cls(SinusoidalEncoder(dims_per_scalar=pos_dims), geo, absent, n_slots, dtype)

    def named_params(self, prefix: str = "fphi") -> dict:
        out = self.geo.named_params(prefix + ".geo")
        out[prefix + ".absent"] = self.absent
        return out


def centroid(mask: InstanceMask) -> tuple:
    """Mean true-pixel coordinates normalized by (W-1, H-1) to [0, 1]^2."""
    rows, cols = np.nonzero(mask.bitmap)
    if rows.size == 0:
        raise EmptyMaskError(f"object {mask.object_id} has an empty mask")
    h, w = mask.bitmap.shape
    return float(cols.mean() / (w - 1)), float(rows.mean() / (h - 1))


def crop_to_geo_input(image: np.ndarray, mask: InstanceMask) -> np.ndarray:
    """Masked bounding-box crop resampled to the geo encoder's input.

    Pixels outside the mask are zeroed, the tight bounding box is cut, and the
    crop is nearest-neighbor resampled to GEO_INPUT_HW; output is float in
    [0, 1] so the crop is a pure function of (image, mask).
    """
    rows, cols = np.nonzero(mask.bitmap)
    if rows.size == 0:
        raise EmptyMaskError(f"object {mask.object_id} has an empty mask")
    masked = np.where(mask.bitmap[:, :, None], image, 0)
    r0, r1 = rows.min(), rows.max()
    c0, c1 = cols.min(), cols.max()
    box = masked[r0 : r1 + 1, c0 : c1 + 1]
    h, w = box.shape[:2]
    rr = np.minimum((np.arange(GEO_INPUT_HW) + 0.5) * h / GEO_INPUT_HW, h - 1).astype(int)
    cc = np.minimum((np.arange(GEO_INPUT_HW) + 0.5) * w / GEO_INPUT_HW, w - 1).astype(int)
    out = box[rr][:, cc].astype(np.float32) / 255.0
    return out


def extract_geo(enc: ConvEncoder, image: np.ndarray, mask: InstanceMask, dtype: str = "f32") -> Tensor:
    """Geometric feature of one object; differentiable into encoder params."""
    if image.shape[:2] != mask.bitmap.shape:
        raise EmptyMaskError("image and mask resolutions differ")
    crop = crop_to_geo_input(image, mask)
    return reshape(enc.apply(tensor(crop[None], dtype)), (enc.out_dim,))


def build_object_set(fphi: FeatureExtractor, image: np.ndarray, masks: list) -> ObjectSet:
    """Tokens for one frame; masks may arrive in any order, slots follow the
    instruction-argument order carried by object_id. Fully occluded masks are
    treated as absent."""
    sets = build_object_sets_batched(fphi, [image], [masks])
    feats = []
    for mask in sorted(masks, key=lambda m: m.object_id):
        if not mask.bitmap.any():
            continue
        pos = sinus_encode(fphi.sinus, centroid(mask), fphi.dtype)
        geo = extract_geo(fphi.geo, image, mask, fphi.dtype)
        feats.append(ObjectFeature(z_pos=pos, z_geo=geo, token=concat([pos, geo], axis=-1)))
    return ObjectSet(reshape(sets.tokens, (fphi.n_slots, fphi.token_width)), sets.presence[0], feats)


def build_object_sets_batched(fphi: FeatureExtractor, images: list, mask_lists: list) -> ObjectSet:
    """Token grids [B, n_slots, w] for a batch of frames in one encoder pass.

    Present tokens are scattered into the absent-token canvas with a constant
    0/1 selection matrix, which keeps the whole construction differentiable
    into the geo encoder and the absent token.
    """
    B = len(images)
    n = fphi.n_slots
    w = fphi.token_width
    dt = DTYPES[fphi.dtype]
    crops = []
    pos_rows = []
    slots = []  # flat index b * n + slot
    presence = np.zeros((B, n), dtype=bool)
    for b, (image, masks) in enumerate(zip(images, mask_lists)):
        if len(masks) > n:
            raise CapacityError(f"{len(masks)} masks exceed capacity {n}")
        for mask in masks:
            if not (0 <= mask.object_id < n):
                raise CapacityError(f"object_id {mask.object_id} outside [0, {n})")
            if not mask.bitmap.any():
                continue  # fully occluded this frame: slot stays absent
            crops.append(crop_to_geo_input(image, mask))
            pos_rows.append(fphi.sinus.encode(centroid(mask)))
            presence[b, mask.object_id] = True
            slots.append(b * n + mask.object_id)
    absent_row = reshape(fphi.absent, (1, w))
    if not crops:
        ones = tensor(np.ones((B * n, 1), dtype=dt))
        return ObjectSet(reshape(matmul(ones, absent_row), (B, n, w)), presence)
    geo = fphi.geo.apply(tensor(np.stack(crops), fphi.dtype))  # [M, geo_dim]
    pos = tensor(np.stack(pos_rows).astype(dt), fphi.dtype)  # [M, pos_dim]
    present_tokens = concat([pos, geo], axis=-1)  # [M, w]
    M = len(slots)
    select = np.zeros((B * n, M), dtype=dt)
    select[slots, np.arange(M)] = 1.0
    fill = np.ones((B * n, 1), dtype=dt)
    fill[slots] = 0.0
    tokens = add(matmul(tensor(select, fphi.dtype), present_tokens),
                 matmul(tensor(fill, fphi.dtype), absent_row))
    return ObjectSet(reshape(tokens, (B, n, w)), presence)
