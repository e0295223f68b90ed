"""Vision-transformer backbone access: checkpoint loading and tensor taps.

The extractor consumes a published self-supervised ViT checkpoint (DINO
DeiT-S/16 by default) and taps three tensors per image:

* attention:  last-block CLS-to-patch self-attention, averaged over heads
               and renormalized over patch positions (the CLS-to-CLS mass is
               dropped),
* patches:    the patch-token hidden states entering the last block (the
               second-to-last layer's output),
* global:     the final CLS embedding after the closing layer norm.

Checkpoint sources: a HuggingFace model id, a local directory saved with
save_pretrained, or "random:<seed>" for a deterministically initialized
model (no download; used by tests and offline environments).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from transformers import ViTConfig, ViTModel

from geal.errors import ConfigError

VARIANTS = {
    # name: (hidden size, attention heads)
    "small": (384, 6),
    "big": (768, 12),
}

DEFAULT_CHECKPOINTS = {
    "small": "facebook/dino-vits16",
    "big": "facebook/dino-vitb16",
}

PATCH_SIZE = 16


@dataclass
class ExtractorConfig:
    variant: str = "small"
    checkpoint: str = ""  # empty -> the variant's published default
    resize: str = "224x224"  # "WxH"; 448x224 for wide segmentation frames
    batch_size: int = 8
    device: str = "cpu"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANTS)}, "
                              f"got {self.variant!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        w, h = self.target_size
        if w % PATCH_SIZE or h % PATCH_SIZE:
            raise ConfigError(f"resize {self.resize!r} must be a multiple of "
                              f"the {PATCH_SIZE}px patch size")

    @property
    def target_size(self):
        """(width, height) pixels."""
        try:
            w, h = self.resize.lower().split("x")
            return int(w), int(h)
        except ValueError as e:
            raise ConfigError(f"resize must look like '224x224', got {self.resize!r}") from e

    @property
    def grid(self):
        """(rows, cols) of the patch grid."""
        w, h = self.target_size
        return h // PATCH_SIZE, w // PATCH_SIZE

    @property
    def region_count(self):
        rows, cols = self.grid
        return rows * cols

    @property
    def feature_dim(self):
        return VARIANTS[self.variant][0]


def load_model(config: ExtractorConfig) -> ViTModel:
    """Instantiate the backbone for `config`; raises ConfigError on mismatch."""
    hidden, heads = VARIANTS[config.variant]
    source = config.checkpoint or DEFAULT_CHECKPOINTS[config.variant]
    if source.startswith("random"):
        _, _, seed = source.partition(":")
        torch.manual_seed(int(seed) if seed else 0)
        vit_config = ViTConfig(
            hidden_size=hidden,
            num_hidden_layers=12,
            num_attention_heads=heads,
            intermediate_size=4 * hidden,
            image_size=224,
            patch_size=PATCH_SIZE,
            attn_implementation="eager",  # sdpa cannot return attention maps
        )
        model = ViTModel(vit_config, add_pooling_layer=False)
    else:
        model = ViTModel.from_pretrained(
            source, add_pooling_layer=False, attn_implementation="eager"
        )
    if model.config.hidden_size != hidden:
        raise ConfigError(
            f"checkpoint {source!r} has hidden size {model.config.hidden_size}, "
            f"variant {config.variant!r} needs {hidden}"
        )
    if model.config.patch_size != PATCH_SIZE:
        raise ConfigError(f"checkpoint {source!r} uses patch size "
                          f"{model.config.patch_size}, expected {PATCH_SIZE}")
    model.eval()
    model.to(config.device)
    return model


@torch.no_grad()
def forward_features(model: ViTModel, pixels: torch.Tensor):
    """Run one batch; returns (attention, patches, global) numpy arrays.

    attention: (B, R) rows summing to 1; patches: (B, R, D); global: (B, D).
    """
    out = model(
        pixel_values=pixels,
        output_attentions=True,
        output_hidden_states=True,
        interpolate_pos_encoding=True,
    )
    # CLS row of the last block's attention, averaged over heads; drop the
    # CLS->CLS column and renormalize over patch positions
    att = out.attentions[-1][:, :, 0, 1:].mean(dim=1)
    att = att / att.sum(dim=1, keepdim=True)
    patches = out.hidden_states[-2][:, 1:, :]
    global_feature = out.last_hidden_state[:, 0, :]
    return (
        att.double().cpu().numpy(),
        patches.double().cpu().numpy(),
        global_feature.double().cpu().numpy(),
    )
