"""Central-difference gradient verification.

:func:`grad_check` compares reverse-mode gradients with finite differences.
:func:`run_gradcheck` drives it over a registry of ops, components and a tiny
full model; this is what ``vit5 gradcheck`` prints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class GradCheckError(ArithmeticError):
    pass


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` maps the input tensor(s) to a scalar tensor. With ``max_coords`` set,
    only that many coordinates per input (chosen by ``seed``) are perturbed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.data.dtype != np.float64:
            raise GradCheckError("grad_check needs f64 inputs; run under precision('f64')")
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise GradCheckError(f"f must return a scalar, got shape {out.shape}")
    out.backward()
    chain = " -> ".join(T.op_chain(out))
    worst = 0.0
    rng = np.random.default_rng(seed)
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.isfinite(analytic).all():
            raise GradCheckError(f"non-finite analytic gradient through {chain}")
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic.reshape(-1)
        with T.no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f(*xs).data)
                flat[i] = orig - eps
                lo = float(f(*xs).data)
                flat[i] = orig
                num = (hi - lo) / (2 * eps)
                err = abs(a_flat[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst


@dataclass
class CheckItem:
    scope: str
    name: str
    max_rel_error: float
    passed: bool
    error: str = ""


# ---------------------------------------------------------------- registry

def _rand(rng: Rng, *shape, positive: bool = False) -> Tensor:
    a = rng.normal(shape)
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a)


def _weighted(out: Tensor, rng: Rng) -> Tensor:
    # random projection to a scalar so every output coordinate matters
    w = Tensor(rng.normal(out.shape))
    return T.sum(T.mul(out, w))


def _op_cases() -> dict[str, Callable[[Rng], float]]:
    shapes = [(3,), (2, 4), (2, 3, 5)]
    cases: dict[str, Callable[[Rng], float]] = {}

    def unary(name, op, shapes=shapes):
        def run(rng):
            return max(grad_check(lambda a: _weighted(op(a), rng.split("w", s)), _rand(rng.split(s), *s))
                       for s in shapes)
        cases[name] = run

    def binary(name, op, pairs):
        def run(rng):
            worst = 0.0
            for sa, sb in pairs:
                r = rng.split(sa, sb)
                a, b = _rand(r.split("a"), *sa), _rand(r.split("b"), *sb)
                worst = max(worst, grad_check(lambda a, b: _weighted(op(a, b), r.split("w")), [a, b]))
            return worst
        cases[name] = run

    ew = [((3,), (3,)), ((2, 4), (4,)), ((2, 3, 5), (3, 1))]
    binary("add", T.add, ew)
    binary("sub", T.sub, ew)
    binary("mul", T.mul, ew)
    binary("matmul", T.matmul, [((2, 3), (3, 4)), ((2, 3, 4), (4, 2)), ((2, 2, 3, 4), (2, 1, 4, 3))])
    unary("scale", lambda a: T.scale(a, -1.7))
    unary("neg", T.neg)
    unary("gelu", T.gelu)
    unary("silu", T.silu)
    unary("softmax_lastdim", T.softmax_lastdim)
    unary("rms_normalize", lambda a: T.rms_normalize(a, 1e-6))
    unary("layer_normalize", lambda a: T.layer_normalize(a, 1e-6))
    unary("sum", T.sum)
    unary("mean_lastdims", lambda a: T.mean_lastdims(a, 1))
    unary("reshape", lambda a: T.reshape(a, (-1,)))
    unary("transpose", lambda a: T.transpose(a, tuple(reversed(range(a.ndim)))))
    unary("slice_tokens", lambda a: T.slice_tokens(a, 0, 1, axis=0))
    unary("gather_rows", lambda a: T.gather_rows(a, [1, 0, 1]), [(2,), (3, 4), (2, 3, 2)])
    unary("concat_tokens", lambda a: T.concat_tokens([a, T.scale(a, 2.0)], axis=0))

    def rot(rng):
        worst = 0.0
        for s in [(2,), (3, 4), (2, 3, 6)]:
            r = rng.split(s)
            ang = r.split("ang").uniform(-3, 3, size=s[:-1] + (s[-1] // 2,))
            worst = max(worst, grad_check(
                lambda a: _weighted(T.rotate_pairs(a, np.cos(ang), np.sin(ang)), r.split("w")),
                _rand(r, *s)))
        return worst
    cases["rotate_pairs"] = rot

    def ce(rng):
        worst = 0.0
        for b, c in [(1, 3), (4, 5), (6, 2)]:
            r = rng.split(b, c)
            labels = r.split("y").integers(0, c, size=b)
            worst = max(worst, grad_check(lambda z: T.cross_entropy_with_logits(z, labels), _rand(r, b, c)))
        return worst
    cases["cross_entropy_with_logits"] = ce
    return cases


def _component_cases() -> dict[str, Callable[[Rng], float]]:
    from . import nn
    from .rope import RopeTables, TokenLayout

    cases: dict[str, Callable[[Rng], float]] = {}

    def rmsnorm_case(rng):
        g = _rand(rng.split("g"), 6)
        return grad_check(lambda x, g: _weighted(nn.rmsnorm(x, nn.RmsNormParams(g)), rng.split("w")),
                          [_rand(rng.split("x"), 4, 6), g])
    cases["rmsnorm"] = rmsnorm_case

    def layernorm_case(rng):
        g, b = _rand(rng.split("g"), 6), _rand(rng.split("b"), 6)
        return grad_check(lambda x, g, b: _weighted(nn.layernorm(x, nn.LayerNormParams(g, b)), rng.split("w")),
                          [_rand(rng.split("x"), 4, 6), g, b])
    cases["layernorm"] = layernorm_case

    def ls_case(rng):
        return grad_check(
            lambda x, f, lam: _weighted(nn.layerscale_residual(x, f, nn.LayerScaleParams(lam)), rng.split("w")),
            [_rand(rng.split("x"), 3, 5), _rand(rng.split("f"), 3, 5), _rand(rng.split("l"), 5)])
    cases["layerscale_residual"] = ls_case

    def pn_case(rng):
        return grad_check(
            lambda x, f, lam: _weighted(nn.postnorm_residual(x, f, nn.PostNormParams(lam)), rng.split("w")),
            [_rand(rng.split("x"), 3, 5), _rand(rng.split("f"), 3, 5), _rand(rng.split("l"), 5)])
    cases["postnorm_residual"] = pn_case

    def rope_case(rng):
        tables = RopeTables(d_head=8, patch_base=1e-2, reg_base=1e-1)
        layout = TokenLayout.for_sequence(grid=(2, 2), registers=1, class_token=True,
                                          prefix_kind=TokenLayout.REGISTER)
        return grad_check(lambda x: _weighted(nn.apply_rope_2d(x, layout, tables), rng.split("w")),
                          _rand(rng, layout.num_tokens, 2, 8))
    cases["apply_rope_2d"] = rope_case

    for qk_norm in (True, False):
        for bias in (True, False):
            name = f"attention[qk_norm={'on' if qk_norm else 'off'},qkv_bias={'on' if bias else 'off'}]"

            def attn_case(rng, qk_norm=qk_norm, bias=bias):
                d, heads = 8, 2
                p = nn.init_attention(rng.split("p"), d, heads, qk_norm=qk_norm, qkv_bias=bias, std=0.5)
                if qk_norm:
                    p.q_norm.gain.data[:] = 1 + 0.3 * rng.split("qg").normal(p.q_norm.gain.shape)
                    p.k_norm.gain.data[:] = 1 + 0.3 * rng.split("kg").normal(p.k_norm.gain.shape)
                tables = RopeTables(d_head=4, patch_base=1e-2, reg_base=1e-1)
                layout = TokenLayout.for_sequence(grid=(2, 2), registers=1, class_token=False,
                                                  prefix_kind=TokenLayout.REGISTER)
                params = p.tensors()
                x = _rand(rng.split("x"), 2, layout.num_tokens, d)

                def f(x, *ps):
                    return _weighted(nn.qk_normalized_attention(x, p, tables, layout), rng.split("w"))
                return grad_check(f, [x, *params])
            cases[name] = attn_case

    for variant in ("gelu", "swiglu"):
        def mlp_case(rng, variant=variant):
            p = nn.init_mlp(rng.split("p"), 6, variant, std=0.5, hidden_dim=8)
            return grad_check(lambda x, *ps: _weighted(nn.mlp_forward(x, p), rng.split("w")),
                              [_rand(rng.split("x"), 3, 6), *p.tensors()])
        cases[f"mlp[{variant}]"] = mlp_case
    return cases


def tiny_model_config(**overrides):
    from .config import ModelConfig
    base = dict(layers=2, dim=16, heads=2, registers=2, patch=2, image_size=4, in_chans=1,
                num_classes=3, layerscale="on", lambda_init=0.5)
    base.update(overrides)
    return ModelConfig(**base)


def _model_cases() -> dict[str, Callable[[Rng], float]]:
    from . import model as M

    variants = {
        "model[vit5]": {},
        "model[postnorm,layernorm,swiglu,qkv_bias]": dict(
            layerscale="postnorm", norm="layernorm", mlp="swiglu", qkv_bias="on", qk_norm="off",
            readout="mean_pool", registers_rope="same_base"),
    }
    cases = {}
    for name, over in variants.items():
        def run(rng, over=over):
            cfg = tiny_model_config(**over)
            model = M.build(cfg, rng.split("init"))
            # perturb zero-initialized head so gradients reach every parameter
            for pname, t in model.params.items():
                if pname.startswith("head"):
                    t.data[:] = rng.split(pname).normal(t.shape, std=0.5)
            images = rng.split("img").uniform(size=(2, cfg.in_chans, cfg.image_size, cfg.image_size))
            labels = np.array([0, 2])
            names = list(model.params)

            def f(*ps):
                return T.cross_entropy_with_logits(M.forward(model, images), labels)
            return grad_check(f, [model.params[n] for n in names], max_coords=12)
        cases[name] = run
    return cases


REGISTRIES = {"ops": _op_cases, "components": _component_cases, "model": _model_cases}


def run_gradcheck(scopes: Sequence[str] = ("ops", "components", "model"), seed: int = 0,
                  tol: float = 1e-4) -> list[CheckItem]:
    items = []
    with T.precision("f64"):
        for scope in scopes:
            if scope not in REGISTRIES:
                raise ValueError(f"unknown gradcheck scope {scope!r}; expected {sorted(REGISTRIES)}")
            for name, case in REGISTRIES[scope]().items():
                rng = Rng(seed).split(scope, name)
                try:
                    err = case(rng)
                    items.append(CheckItem(scope, name, err, bool(err < tol)))
                except (GradCheckError, FloatingPointError) as exc:
                    items.append(CheckItem(scope, name, float("nan"), False, str(exc)))
    return items
