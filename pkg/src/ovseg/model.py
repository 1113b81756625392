"""Full segmentation model: encoders, refinement head, and decoder in one module.

The trainable parameters split into two optimizer groups: the backbone group
(vision encoder, text encoder, prior encoder, early refiner) and the head
group (correlation projection, late refinement, decoder). forward() accepts an
optional trace dict that records which graph paths ran, which the ablation
harness asserts against.
"""

import numpy as np

from .config import ModelConfig
from .correlation import CorrelationProjector, cosine_volumes
from .decoder import UpsamplingDecoder
from .early_refinement import EarlyRefiner
from .encoders import PriorEncoder, TextEncoder, VisionEncoder
from .late_refinement import LateRefineStack
from .nn import Module


class SegModel(Module):
    def __init__(self, config: ModelConfig, seed=0):
        super().__init__()
        config.validate()
        self.config = config
        streams = [np.random.Generator(np.random.PCG64(s))
                   for s in np.random.SeedSequence(seed).spawn(7)]
        self.vision = VisionEncoder(streams[0], channels=config.channels,
                                    patch=config.patch, depth=config.vit_depth,
                                    heads=config.vit_heads,
                                    use_pos_embed=config.use_pos_embed)
        self.text = TextEncoder(streams[1], channels=config.channels,
                                hash_dim=config.text_hash_dim)
        self.prior = PriorEncoder(streams[2], channels=config.spe_channels,
                                  patch=config.patch, depth=config.spe_depth,
                                  heads=config.vit_heads,
                                  use_pos_embed=config.use_pos_embed)
        self.refiner = EarlyRefiner(streams[3], channels=config.channels,
                                    patch=config.patch, window=config.refine_window,
                                    heads=config.refine_heads)
        self.corr_proj = CorrelationProjector(streams[4], config.corr_channels)
        self.late = LateRefineStack(streams[5], config.corr_channels,
                                    config.spe_channels, config.channels,
                                    stages=config.late_stages,
                                    window=config.spatial_window,
                                    heads=config.spatial_heads)
        self.decoder = UpsamplingDecoder(streams[6], config.corr_channels,
                                         config.spe_channels)

    # -- structure -----------------------------------------------------------
    BACKBONE = ("vision", "text", "prior", "refiner")
    HEAD = ("corr_proj", "late", "decoder")

    def param_groups(self):
        """(backbone, head) parameter lists; asserts the split is exhaustive."""
        groups = {"backbone": [], "head": []}
        for name, p in self.named_parameters():
            top = name.split(".", 1)[0]
            if top in self.BACKBONE:
                groups["backbone"].append((name, p))
            elif top in self.HEAD:
                groups["head"].append((name, p))
            else:
                raise AssertionError(f"parameter {name} belongs to no lr group")
        assigned = len(groups["backbone"]) + len(groups["head"])
        total = sum(1 for _ in self.named_parameters())
        assert assigned == total, "lr group assignment is not exhaustive"
        return groups

    # -- pipeline ------------------------------------------------------------
    def encode_texts(self, class_names):
        return self.text(class_names)

    def head_forward(self, image, features, guidance, texts, trace=None):
        """Refinement head: dense features + guidance + texts -> logits."""
        cfg = self.config
        if cfg.early_refine:
            refined = self.refiner(image, features)
        else:
            refined = features
        sim_g, sim_l = cosine_volumes(refined, texts)
        corr = self.corr_proj(sim_g, sim_l, text_ensemble=cfg.text_ensemble)
        corr = self.late(corr, guidance, texts)
        image_hw = (image.shape[-2], image.shape[-1])
        logits = self.decoder(corr, guidance, image_hw)
        if trace is not None:
            trace["early_refine"] = cfg.early_refine
            trace["ensemble_inputs"] = ("global", "local") if cfg.text_ensemble \
                else ("local", "local")
            trace["late_stages"] = cfg.late_stages
        return logits

    def forward(self, image, texts, trace=None):
        """Single-crop training/inference path (no tiling)."""
        _, features = self.vision(image)
        guidance = self.prior(image)
        if trace is not None:
            trace["tiled_vlm"] = False
            trace["tiled_spe"] = False
        return self.head_forward(image, features, guidance, texts, trace)

    def __call__(self, image, texts, trace=None):
        return self.forward(image, texts, trace)
