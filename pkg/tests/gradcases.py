"""Finite-difference cases shared by the unit and acceptance suites.

Each factory takes a seed and returns ``(loss_fn, params)`` in float64.  The
layer output is contracted with a fixed random tensor so no gradient is
trivially zero (softmax rows, for instance, always sum to one).
"""

import torch

from sleepadapt import autodiff as ad

D = torch.float64


def _g(seed):
    return torch.Generator().manual_seed(seed)


def _r(gen, *shape, scale=1.0):
    return (torch.randn(*shape, generator=gen, dtype=D) * scale).requires_grad_(True)


def _contract(out, gen):
    weights = torch.randn(out.shape, generator=gen, dtype=D)
    return (out * weights).sum()


def case_conv1d(seed):
    g = _g(seed)
    x, w, b = _r(g, 2, 3, 12), _r(g, 4, 3, 5), _r(g, 4)
    proj = torch.randn(2, 4, 12, generator=g, dtype=D)
    return (lambda: (ad.conv1d(x, w, b) * proj).sum()), [x, w, b]


def case_elu(seed):
    g = _g(seed)
    x = _r(g, 3, 10, scale=2.0)
    proj = torch.randn(3, 10, generator=g, dtype=D)
    return (lambda: (ad.elu(x) * proj).sum()), [x]


def case_batch_norm(seed):
    g = _g(seed)
    x, gamma, beta = _r(g, 3, 4, 8), _r(g, 4), _r(g, 4)
    proj = torch.randn(3, 4, 8, generator=g, dtype=D)
    return (lambda: (ad.batch_norm_1d(x, gamma, beta, training=True) * proj).sum()), [x, gamma, beta]


def case_batch_norm_inference(seed):
    g = _g(seed)
    x, gamma, beta = _r(g, 2, 4, 8), _r(g, 4), _r(g, 4)
    rm = torch.randn(4, generator=g, dtype=D)
    rv = torch.rand(4, generator=g, dtype=D) + 0.5
    proj = torch.randn(2, 4, 8, generator=g, dtype=D)
    return (lambda: (ad.batch_norm_1d(x, gamma, beta, rm, rv, training=False) * proj).sum()), [x, gamma, beta]


def case_max_pool(seed):
    g = _g(seed)
    x = _r(g, 2, 3, 16)
    proj = torch.randn(2, 3, 8, generator=g, dtype=D)
    return (lambda: (ad.max_pool_1d(x, 2) * proj).sum()), [x]


def case_upsample(seed):
    g = _g(seed)
    x = _r(g, 2, 3, 5)
    proj = torch.randn(2, 3, 10, generator=g, dtype=D)
    return (lambda: (ad.nearest_upsample_1d(x, 2) * proj).sum()), [x]


def case_linear(seed):
    g = _g(seed)
    x, w, b = _r(g, 5, 6), _r(g, 3, 6), _r(g, 3)
    proj = torch.randn(5, 3, generator=g, dtype=D)
    return (lambda: (ad.linear(x, w, b) * proj).sum()), [x, w, b]


def case_softmax(seed):
    g = _g(seed)
    x = _r(g, 4, 5, scale=2.0)
    proj = torch.randn(4, 5, generator=g, dtype=D)
    return (lambda: (ad.softmax(x) * proj).sum()), [x]


def case_sigmoid(seed):
    g = _g(seed)
    x = _r(g, 7, scale=3.0)
    proj = torch.randn(7, generator=g, dtype=D)
    return (lambda: (ad.sigmoid(x) * proj).sum()), [x]


def case_layer_norm(seed):
    g = _g(seed)
    x, gamma, beta = _r(g, 4, 6), _r(g, 6), _r(g, 6)
    proj = torch.randn(4, 6, generator=g, dtype=D)
    return (lambda: (ad.layer_norm(x, gamma, beta) * proj).sum()), [x, gamma, beta]


def case_add_concat(seed):
    g = _g(seed)
    a, b, c = _r(g, 2, 3, 4), _r(g, 2, 3, 4), _r(g, 2, 2, 4)
    proj = torch.randn(2, 5, 4, generator=g, dtype=D)
    return (lambda: (ad.concat([ad.add(a, b), c]) * proj).sum()), [a, b, c]


def case_mean_pool(seed):
    g = _g(seed)
    x = _r(g, 2, 3, 12)
    proj = torch.randn(2, 3, 4, generator=g, dtype=D)
    return (lambda: (ad.mean_pool_over_window(x, 3) * proj).sum()), [x]


def case_attention(seed):
    g = _g(seed)
    e = 8
    x = _r(g, 2, 5, e)
    w_qkv, b_qkv = _r(g, 3 * e, e, scale=0.4), _r(g, 3 * e, scale=0.1)
    w_out, b_out = _r(g, e, e, scale=0.4), _r(g, e, scale=0.1)
    proj = torch.randn(2, 5, e, generator=g, dtype=D)
    return (lambda: (ad.multi_head_self_attention(x, w_qkv, b_qkv, w_out, b_out, n_heads=4) * proj).sum(),
            [x, w_qkv, b_qkv, w_out, b_out])


LAYER_CASES = {
    "conv1d": case_conv1d,
    "elu": case_elu,
    "batch_norm": case_batch_norm,
    "batch_norm_inference": case_batch_norm_inference,
    "max_pool": case_max_pool,
    "nearest_upsample": case_upsample,
    "linear": case_linear,
    "softmax": case_softmax,
    "sigmoid": case_sigmoid,
    "layer_norm": case_layer_norm,
    "add_concat": case_add_concat,
    "mean_pool": case_mean_pool,
    "attention": case_attention,
}


# -------------------------------------------------------- composite losses

def _tiny(seed):
    from sleepadapt.models import DiscriminatorConfig, ScorerConfig, ScorerModel, build_ensemble

    scfg = ScorerConfig(depth=2, base_filters=3, kernel_size=3, epoch_samples=16)
    dcfg = DiscriminatorConfig(embed_dim=8, n_layers=1, n_heads=2, window_epochs=8, ensemble_size=2)
    scorer = ScorerModel(scfg, seed=seed).double()
    scorer.eval()
    ens = [d.double() for d in build_ensemble(dcfg, seed=seed)]
    g = _g(seed)
    x_s = torch.randn(1, 2, 16 * 10, generator=g, dtype=D)
    x_t = torch.randn(1, 2, 16 * 10, generator=g, dtype=D) * 1.5
    return scorer, ens, x_s, x_t


def case_loss_disc(seed):
    from sleepadapt.trainer import loss_disc

    scorer, ens, x_s, x_t = _tiny(seed)
    with torch.no_grad():
        f_s = scorer(x_s)[0]
        f_t = scorer(x_t)[0]
    params = [p for d in ens for p in d.parameters()]
    return (lambda: loss_disc(ens, f_s, f_t, [0, 2], [1, 2])), params


def case_loss_gen(seed):
    from sleepadapt.trainer import loss_gen

    scorer, ens, _, x_t = _tiny(seed)
    e_t = scorer.encoder
    params = list(e_t.parameters())
    return (lambda: loss_gen(ens, torch.softmax(scorer.logits(x_t, e_t), -1)[0], [0, 1, 2])), params


def case_loss_anchor(seed):
    import copy

    from sleepadapt.trainer import loss_anchor

    scorer, _, x_s, _ = _tiny(seed)
    e_s = scorer.encoder
    e_t = copy.deepcopy(e_s)
    with torch.no_grad():
        for p in e_t.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=_g(seed + 1), dtype=D))
    return (lambda: loss_anchor(e_t, e_s, x_s)), list(e_t.parameters())


def case_encoder_objective(seed):
    from sleepadapt.trainer import loss_anchor, loss_gen

    scorer, ens, x_s, x_t = _tiny(seed)
    import copy

    e_s = copy.deepcopy(scorer.encoder)
    e_t = scorer.encoder
    with torch.no_grad():
        ref = e_s(x_s)[0]

    def f():
        f_t = torch.softmax(scorer.logits(x_t, e_t), -1)[0]
        return 1.0 * loss_gen(ens, f_t, [0, 2]) + 0.1 * loss_anchor(e_t, ref + 0.01, x_s)

    return f, list(e_t.parameters())


COMPOSITE_CASES = {
    "loss_disc": case_loss_disc,
    "loss_gen": case_loss_gen,
    "loss_anchor": case_loss_anchor,
    "encoder_objective": case_encoder_objective,
}
