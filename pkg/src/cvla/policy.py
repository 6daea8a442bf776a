"""Conditional diffusion transformer policies.

GeneralPolicy maps an observation history (images, instruction, proprioception)
to action chunks by iterative denoising. ExpertPolicy is a grafted
GeneralPolicy whose cross-attention blocks gained zero-initialized object-token
branches plus the mask-to-token feature extractor; at the moment of grafting
its behavior is exactly the base policy's.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .diffusion import NoiseSchedule, ddim_sample
from .errors import ArgumentError, DimensionError
from .numerics import DTYPES, RngStream, Tensor, add, concat, embed, gelu, linear, reshape, tensor
from .nnblocks import ConvEncoder, LinearLayer, LayerNorm, TransformerBlock, graft_zero_branch, step_embedding
from .objcentric import FeatureExtractor, ObjectSet, build_object_set
from .simworld import DELTA_MAX, IMAGE_HW, INSTR_LEN, Observation, VOCAB

ACTION_SCALE = np.array([DELTA_MAX, DELTA_MAX, 0.5], dtype=np.float32)
ACTION_OFFSET = np.array([0.0, 0.0, 0.5], dtype=np.float32)
X0_CLIP = 1.0  # normalized actions live in [-1, 1]


@dataclass(frozen=True)
class ArchConfig:
    width: int = 128
    heads: int = 4
    depth: int = 4
    t_obs: int = 2
    t_act: int = 16
    action_dim: int = 3
    image_hw: int = IMAGE_HW
    patch_tokens: int = 16
    instr_len: int = INSTR_LEN
    vocab_size: int = len(VOCAB)
    diffusion_steps: int = 100
    ddim_steps: int = 16
    n_obj_slots: int = 4
    mlp_ratio: int = 3
    dtype: str = "f32"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def n_ctx(self):
        return self.t_obs * (self.patch_tokens + 1) + self.instr_len


def normalize_actions(raw: np.ndarray) -> np.ndarray:
    return ((raw - ACTION_OFFSET) / ACTION_SCALE).astype(np.float32)


def denormalize_actions(norm: np.ndarray) -> np.ndarray:
    raw = norm * ACTION_SCALE + ACTION_OFFSET
    raw[..., 0] = np.clip(raw[..., 0], -DELTA_MAX, DELTA_MAX)
    raw[..., 1] = np.clip(raw[..., 1], -DELTA_MAX, DELTA_MAX)
    raw[..., 2] = np.clip(raw[..., 2], 0.0, 1.0)
    return raw.astype(np.float32)


def _embed_param(stream: RngStream, label: str, shape, dtype: str) -> Tensor:
    vals = stream.derive(label).normal(shape) * 0.02
    return tensor(vals.astype(DTYPES[dtype]), dtype, requires_grad=True)


class GeneralPolicy:
    """Observation encoders plus the denoising transformer."""

    def __init__(self, arch: ArchConfig, stream: RngStream):
        if arch.image_hw != IMAGE_HW:
            raise ArgumentError(f"image encoder is fixed at {IMAGE_HW}x{IMAGE_HW}")
        self.arch = arch
        w, dt = arch.width, arch.dtype
        self.image_enc = ConvEncoder.image_tokens(stream, "image_enc", w, dt)
        self.instr_table = _embed_param(stream, "instr_embed.table", (arch.vocab_size, w), dt)
        self.instr_pos = _embed_param(stream, "instr_embed.pos", (arch.instr_len, w), dt)
        self.proprio_fc0 = LinearLayer.create(stream, "proprio.fc0", w, 3, dt)
        self.proprio_fc1 = LinearLayer.create(stream, "proprio.fc1", w, w, dt)
        self.proprio_tag = _embed_param(stream, "proprio.tag", (w,), dt)
        self.frame_embed = _embed_param(stream, "frame_embed", (arch.t_obs, w), dt)
        self.patch_pos = _embed_param(stream, "patch_pos", (arch.patch_tokens, w), dt)
        self.step_fc0 = LinearLayer.create(stream, "step.fc0", w, w, dt)
        self.step_fc1 = LinearLayer.create(stream, "step.fc1", w, w, dt)
        self.action_in = LinearLayer.create(stream, "action_in", w, arch.action_dim, dt)
        self.action_pos = _embed_param(stream, "action_pos", (arch.t_act, w), dt)
        self.blocks = [
            TransformerBlock.create(stream, f"blocks.{i}", w, arch.heads, arch.mlp_ratio, dt)
            for i in range(arch.depth)
        ]
        self.final_ln = LayerNorm.create(w, dt)
        self.action_out = LinearLayer.create(stream, "action_out", arch.action_dim, w, dt)
        self.schedule = NoiseSchedule(arch.diffusion_steps)

    @property
    def is_expert(self):
        return False

    def named_params(self) -> dict:
        out = {}
        out.update(self.image_enc.named_params("image_enc"))
        out["instr_embed.table"] = self.instr_table
        out["instr_embed.pos"] = self.instr_pos
        out.update(self.proprio_fc0.named_params("proprio.fc0"))
        out.update(self.proprio_fc1.named_params("proprio.fc1"))
        out["proprio.tag"] = self.proprio_tag
        out["frame_embed"] = self.frame_embed
        out["patch_pos"] = self.patch_pos
        out.update(self.step_fc0.named_params("step.fc0"))
        out.update(self.step_fc1.named_params("step.fc1"))
        out.update(self.action_in.named_params("action_in"))
        out["action_pos"] = self.action_pos
        for i, b in enumerate(self.blocks):
            out.update(b.named_params(f"blocks.{i}"))
        out.update(self.final_ln.named_params("final_ln"))
        out.update(self.action_out.named_params("action_out"))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    # -- observation encoding -------------------------------------------------

    def encode_batch(self, images: np.ndarray, instr: np.ndarray, proprio: np.ndarray) -> Tensor:
        """images [B,T_o,H,W,3] uint8, instr [B,L] ids, proprio [B,T_o,3] in unit ranges."""
        arch = self.arch
        B = images.shape[0]
        if images.shape[1] != arch.t_obs:
            raise ArgumentError(f"history length {images.shape[1]} != {arch.t_obs}")
        w = arch.width
        dt = DTYPES[arch.dtype]
        flat = tensor(images.reshape(-1, arch.image_hw, arch.image_hw, 3).astype(dt) / 255.0, arch.dtype)
        patches = self.image_enc.apply(flat)  # [B*T_o, P, w]
        patches = reshape(patches, (B, arch.t_obs, arch.patch_tokens, w))
        patches = add(patches, reshape(self.patch_pos, (1, 1, arch.patch_tokens, w)))
        patches = add(patches, reshape(self.frame_embed, (1, arch.t_obs, 1, w)))
        patches = reshape(patches, (B, arch.t_obs * arch.patch_tokens, w))

        q = tensor((proprio.astype(np.float64) * 2.0 - 1.0).astype(dt), arch.dtype)
        q = self.proprio_fc1.apply(gelu(self.proprio_fc0.apply(q)))  # [B, T_o, w]
        q = add(q, reshape(self.proprio_tag, (1, 1, w)))
        q = add(q, reshape(self.frame_embed, (1, arch.t_obs, w)))

        if instr.shape[1] != arch.instr_len:
            raise ArgumentError(f"instruction length {instr.shape[1]} != {arch.instr_len}")
        text = embed(self.instr_table, instr.astype(np.int64))
        text = add(text, reshape(self.instr_pos, (1, arch.instr_len, w)))

        return concat([patches, q, text], axis=1)

    # -- denoiser --------------------------------------------------------------

    def denoise(self, noisy: Tensor, k, context: Tensor, object_tokens: Tensor | None) -> Tensor:
        if object_tokens is not None:
            raise ArgumentError("object tokens supplied to a policy without an object branch")
        return self._transformer(noisy, k, context, None)

    def _transformer(self, noisy: Tensor, k, context: Tensor, z: Tensor | None) -> Tensor:
        arch = self.arch
        w = arch.width
        if noisy.shape[-2:] != (arch.t_act, arch.action_dim):
            raise DimensionError(f"chunk shape {noisy.shape} != (..., {arch.t_act}, {arch.action_dim})")
        batched = noisy.ndim == 3
        x = self.action_in.apply(noisy)
        x = add(x, reshape(self.action_pos, (1, arch.t_act, w)) if batched else self.action_pos)
        kemb = step_embedding(k, w, dtype=arch.dtype)
        kemb = self.step_fc1.apply(gelu(self.step_fc0.apply(kemb)))
        if batched and kemb.ndim == 2:
            kemb = reshape(kemb, (kemb.shape[0], 1, w))
        x = add(x, kemb)
        for block in self.blocks:
            x = block.apply(x, context, z)
        return self.action_out.apply(self.final_ln.apply(x))


class ExpertPolicy:
    """A GeneralPolicy with dual cross-attention and object features; shares
    the base policy's parameter storage."""

    def __init__(self, base: GeneralPolicy, fphi: FeatureExtractor):
        self.base = base
        self.arch = base.arch
        self.schedule = base.schedule
        self.fphi = fphi
        self.blocks = [
            TransformerBlock(b.ln1, b.self_attn, b.ln2, graft_zero_branch(b.cross), b.ln3, b.mlp)
            for b in base.blocks
        ]

    @property
    def is_expert(self):
        return True

    def encode_batch(self, images, instr, proprio) -> Tensor:
        return self.base.encode_batch(images, instr, proprio)

    def named_params(self) -> dict:
        out = self.base.named_params()
        for i, b in enumerate(self.blocks):
            out.update(b.cross.z_kv_proj.named_params(f"blocks.{i}.cross.z_kv"))
        out.update(self.fphi.named_params("fphi"))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def added_param_counts(self) -> dict:
        """Exact accounting of what grafting added on top of the base."""
        zkv = sum(
            b.cross.z_kv_proj.W.size + b.cross.z_kv_proj.B.size for b in self.blocks
        )
        fphi = sum(p.size for p in self.fphi.named_params("fphi").values())
        return {"z_kv": zkv, "fphi": fphi, "total": zkv + fphi}

    def denoise(self, noisy: Tensor, k, context: Tensor, object_tokens) -> Tensor:
        if object_tokens is None:
            raise ArgumentError("expert policy requires an object set")
        z = object_tokens.tokens if isinstance(object_tokens, ObjectSet) else object_tokens
        batched = noisy.ndim == 3
        if batched and z.ndim == 2:
            z = reshape(z, (1,) + z.shape)
        return self.base._transformer(noisy, k, context, z)


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------


def pad_history(frames: list, t_obs: int) -> list:
    """Left-pad a short history by repeating its first frame."""
    if not frames:
        raise ArgumentError("empty observation history")
    return [frames[0]] * (t_obs - len(frames)) + list(frames)


def _stack_history(policy, obs_history) -> tuple:
    arch = policy.arch
    if len(obs_history) != arch.t_obs:
        raise ArgumentError(f"history length {len(obs_history)} != t_obs {arch.t_obs}")
    images = np.stack([o.image for o in obs_history])[None]
    instr = obs_history[-1].instruction[None]
    proprio = np.stack([o.proprio for o in obs_history])[None]
    return images, instr, proprio


def encode_observation(policy, obs_history: list) -> Tensor:
    """Context token sequence [n_ctx, width] for one observation history."""
    images, instr, proprio = _stack_history(policy, obs_history)
    ctx = policy.encode_batch(images, instr, proprio)
    return reshape(ctx, ctx.shape[1:])


def predict_noise(policy, noisy: Tensor, k, context: Tensor, object_set=None) -> Tensor:
    """Denoiser forward; object_set is required iff the policy is an expert."""
    return policy.denoise(noisy, k, context, object_set)


def act(policy, obs_history: list, stream: RngStream, object_set=None) -> np.ndarray:
    """Sample one action chunk [t_act, 3] via the accelerated sampler, then
    clamp to action bounds. Context is encoded once, outside the denoise loop."""
    arch = policy.arch
    context = encode_observation(policy, obs_history)

    def denoiser(noisy, k, ctx):
        return policy.denoise(noisy, k, ctx, object_set)

    chunk = ddim_sample(
        policy.schedule, denoiser, context, stream, (arch.t_act, arch.action_dim),
        steps=arch.ddim_steps, dtype=arch.dtype, x0_clip=X0_CLIP,
    )
    return denormalize_actions(chunk.data)


def extend_to_expert(g: GeneralPolicy, stream: RngStream | None = None) -> ExpertPolicy:
    """Graft zero-initialized object branches onto every cross-attention block
    and attach a freshly initialized feature extractor."""
    stream = stream or RngStream(0x0B1EC7)
    fphi = FeatureExtractor.create(stream, width=g.arch.width, n_slots=g.arch.n_obj_slots, dtype=g.arch.dtype)
    return ExpertPolicy(g, fphi)


def object_tokens_for_frame(policy: ExpertPolicy, image: np.ndarray, masks: list) -> ObjectSet:
    """Current-frame object set for inference-time conditioning."""
    return build_object_set(policy.fphi, image, masks)
