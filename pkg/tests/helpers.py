import numpy as np

from titrl.backbone import TITConfig, TITModel


def perturb_params(model, seed: int, scale: float = 0.3):
    """Replace every parameter with gains near 1 and everything else random (breaks init symmetries)."""
    rng = np.random.default_rng(seed)
    for name, t in model.named_parameters():
        base = 1.0 if "gain" in name else 0.0
        t.data = (base + scale * rng.normal(size=t.shape)).astype(t.dtype)
    return model


def tiny_model(variant="enhanced", seed=0, obs_shape=(4,), patch_size=1, L=2, K=2, d=8, heads=2, **kw):
    cfg = TITConfig(obs_shape=obs_shape, patch_size=patch_size, embed_dim=d, num_blocks=L, context_len=K,
                    inner_heads=heads, outer_heads=heads, variant=variant, **kw)
    return perturb_params(TITModel(cfg, seed), seed + 100)


def zero_blocks(model):
    for b in list(model.inner_blocks) + list(model.outer_blocks):
        for name, t in b.named_parameters():
            t.data = np.ones_like(t.data) if "gain" in name else np.zeros_like(t.data)
    return model
