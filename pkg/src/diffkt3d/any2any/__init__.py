"""Any2Any diffusion transformer with slot-aware 4D rotary embeddings."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    MODALITY_INDEX,
    ROLE_CONDITION,
    ROLE_TARGET,
    SLOT_OF,
    SLOT_ORDER,
    Any2AnyDiT,
    Conditioning,
    DitConfig,
    ModelError,
    TaskAssignment,
    TokenGrid,
    add_role_embedding,
    build_token_grid,
    conditioning_code,
    dit_forward,
    embed_time,
    fuse_conditioning,
    init_params,
    patch_embed,
    patchify,
    predict,
    sample_task,
    timestep_embedding,
    token_coords,
    unpatchify,
)
from .rope import RopeConfig, RopeError, apply_rope, rope4d_embed, rope_freqs, rotate

__all__ = [name for name in dir() if not name.startswith("_")]
