import numpy as np
import pytest
import torch

from kmtr.backbone import EncoderConfig, MaskedAutoencoder
from kmtr.phantom import PhantomConfig, generate_subject
from kmtr.tokenizer import PatchGridSpec


@pytest.fixture(scope="session")
def tiny_phantom_config():
    return PhantomConfig(S=2, T=8, H=32, W=32, seed=11,
                         lv_semi_axis_a=(4.0, 6.0), lv_semi_axis_b=(3.5, 5.0),
                         wall_thickness=(1.5, 2.5), center_jitter=1.0)


@pytest.fixture(scope="session")
def tiny_subject(tiny_phantom_config):
    return generate_subject(tiny_phantom_config, 3)


@pytest.fixture(scope="session")
def desk_subject():
    record, image, seg = generate_subject(PhantomConfig(seed=5), 2)
    return record, image, seg


@pytest.fixture()
def tiny_model():
    spec = PatchGridSpec((2, 4, 4))
    shape = (2, 8, 32, 32)
    cfg = EncoderConfig(dim=16, depth=1, dec_depth=1, heads=2, mlp_ratio=2.0,
                        patch_dim=spec.patch_dim, grid=spec.grid(shape))
    torch.manual_seed(0)
    model = MaskedAutoencoder(cfg)
    # break the identity-preserving zero init so outputs depend on attention/MLP paths
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for blk in list(model.blocks) + list(model.decoder.blocks):
            blk.attn.proj.weight.copy_(torch.randn(blk.attn.proj.weight.shape, generator=g) * 0.05)
            blk.fc2.weight.copy_(torch.randn(blk.fc2.weight.shape, generator=g) * 0.05)
        model.cls_token.copy_(torch.randn(model.cls_token.shape, generator=g) * 0.1)
        model.decoder.mask_token.copy_(torch.randn(model.decoder.mask_token.shape, generator=g) * 0.1)
    return model, spec, shape


def random_volume(shape, seed=0, complex_=True):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    if complex_:
        x = x + 1j * rng.standard_normal(shape)
    return x
