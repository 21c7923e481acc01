import torch

from steerdistill.backbone import Backbone, BackboneConfig


def constant_model(vocab: int, favoured: int, d_model: int = 8, margin: float = 50.0) -> Backbone:
    """A backbone whose every position predicts ``favoured`` with near-certainty."""
    m = Backbone(BackboneConfig(vocab, d_model=d_model, n_layers=1, n_heads=2, d_ff=16, max_context=512), "float64")
    with torch.no_grad():
        m.lnf_w.zero_()
        m.lnf_b.zero_()
        m.lnf_b[0] = 1.0
        m.head_w.zero_()
        m.head_w[favoured, 0] = margin
    return m.freeze()
