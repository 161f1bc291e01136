"""Acceptance gate: one test per shipping criterion, one printed line each.

Every test is seeded and self-contained; budgets are wall-clock upper
bounds on the reference machine, asserted alongside the criterion itself.
"""

import os
import time

import numpy as np

from keyedconv import (
    KeyedModel,
    OffsetVolume,
    Tensor,
    bitwise_equal,
    conv2d_ref,
    conv_output_size,
    deform_conv2d,
    deform_maxpool2d,
    derive_conv_offsets,
    derive_pool_offsets,
    divergence_score,
    equivalence_report,
    gather_spatial,
    generate_key,
    keyed_compile,
    keyed_forward,
    maxpool2d_ref,
    plain_forward,
    read_key,
    read_tensor,
    shuffle,
    unshuffle,
    write_key,
    write_tensor,
)
from keyedconv.cli import main as cli_main
from keyedconv.deform import ConvParams, PoolParams

from _models import (
    access_probe_model,
    fault_probe_model,
    rand_image,
    rand_tensor,
    random_model,
)


def _geometry(rng):
    """Case parameters within the advertised envelope: H,W <= 16,
    n in {1,2,3,5}, stride in {1,2}, padding < n, non-empty output."""
    n = int(rng.choice([1, 2, 3, 5]))
    stride = int(rng.choice([1, 2]))
    padding = int(rng.integers(0, n))
    lo = max(1, n - 2 * padding)
    h = int(rng.integers(lo, 17))
    w = int(rng.integers(lo, 17))
    return h, w, n, stride, padding


def _keys(rng, h, w, out_h, out_w):
    key_in = generate_key(h, w, int(rng.integers(0, 2**64, dtype=np.uint64)))
    key_out = generate_key(out_h, out_w, int(rng.integers(0, 2**64, dtype=np.uint64)))
    return key_in, key_out


def test_operator_keyed_equivalence(acceptance):
    rng = np.random.default_rng(0xA1)
    start = time.perf_counter()
    cases = 1000
    conv_ok = pool_ok = 0

    for _ in range(cases):
        h, w, n, stride, padding = _geometry(rng)
        out_h = conv_output_size(h, n, stride, padding)
        out_w = conv_output_size(w, n, stride, padding)
        key_in, key_out = _keys(rng, h, w, out_h, out_w)
        c_in = int(rng.integers(1, 3))
        c_out = int(rng.integers(1, 3))
        x = rand_image(rng, (c_in, h, w))
        weight = rand_tensor(rng, c_out, c_in, n, n)
        bias = rand_tensor(rng, c_out)

        params = ConvParams(n, stride, padding, c_in, c_out)
        offs = derive_conv_offsets(key_in, key_out, params)
        keyed = deform_conv2d(shuffle(x, key_in), weight, bias, offs, params)
        expected = gather_spatial(conv2d_ref(x, weight, bias, stride, padding), key_out)
        conv_ok += bitwise_equal(keyed, expected)

    for _ in range(cases):
        h, w, n, stride, padding = _geometry(rng)
        out_h = conv_output_size(h, n, stride, padding)
        out_w = conv_output_size(w, n, stride, padding)
        key_in, key_out = _keys(rng, h, w, out_h, out_w)
        c = int(rng.integers(1, 3))
        x = rand_image(rng, (c, h, w))

        params = PoolParams(n, stride, padding)
        offs = derive_pool_offsets(key_in, key_out, params)
        keyed = deform_maxpool2d(shuffle(x, key_in), offs, params)
        expected = gather_spatial(maxpool2d_ref(x, n, stride, padding), key_out)
        pool_ok += bitwise_equal(keyed, expected)

    elapsed = time.perf_counter() - start
    ok = conv_ok == cases and pool_ok == cases
    acceptance("operator keyed equivalence",
               ok, f"conv {conv_ok}/{cases}, pool {pool_ok}/{cases} bitwise",
               elapsed, 30.0)


def test_end_to_end_keyed_equivalence(acceptance):
    rng = np.random.default_rng(0xE2E)
    start = time.perf_counter()
    trials = 50
    equal = residuals = 0
    heads = set()

    for i in range(trials):
        with_residual = i % 5 == 0
        head = "gap" if i % 2 == 0 else "flatten"
        model = random_model(rng, with_residual=with_residual, head=head)
        spatial = sum(hasattr(layer, "params") for layer in model.layers)
        assert spatial <= 6
        residuals += with_residual
        heads.add(head)

        _, h, w = model.input_dims
        key = generate_key(h, w, int(rng.integers(0, 2**64, dtype=np.uint64)))
        seed = int(rng.integers(0, 2**64, dtype=np.uint64))
        x = rand_image(rng, model.input_dims)

        keyed = keyed_compile(model, key, seed)
        keyed_out, _ = keyed_forward(keyed, shuffle(x, key))
        plain_out, _ = plain_forward(model, x)
        equal += bitwise_equal(keyed_out, plain_out)

    elapsed = time.perf_counter() - start
    ok = equal == trials and residuals >= 10 and heads == {"gap", "flatten"}
    acceptance("end-to-end keyed equivalence",
               ok, f"{equal}/{trials} bitwise, {residuals} residual models, "
                   f"heads {sorted(heads)}",
               elapsed, 60.0)


def test_access_control_wrong_key_divergence(acceptance):
    rng = np.random.default_rng(0xAC)
    start = time.perf_counter()
    trials = 100
    diverged = 0
    worst = float("inf")

    for i in range(trials):
        model = access_probe_model(rng, head="gap" if i % 2 == 0 else "flatten")
        _, h, w = model.input_dims
        true_key = generate_key(h, w, int(rng.integers(0, 2**64, dtype=np.uint64)))
        wrong_key = generate_key(h, w, int(rng.integers(0, 2**64, dtype=np.uint64)))
        while wrong_key == true_key:
            wrong_key = generate_key(h, w, int(rng.integers(0, 2**64, dtype=np.uint64)))
        inputs = [rand_image(rng, model.input_dims) for _ in range(3)]
        seed = int(rng.integers(0, 2**64, dtype=np.uint64))
        mean_rel_l2, _ = divergence_score(model, true_key, wrong_key, seed, inputs)
        diverged += mean_rel_l2 >= 1e-2
        worst = min(worst, mean_rel_l2)

    elapsed = time.perf_counter() - start
    acceptance("access control under wrong keys",
               diverged >= 99,
               f"{diverged}/{trials} trials with relative L2 >= 1e-2 "
               f"(min observed {worst:.3g})",
               elapsed, 60.0)


def test_offset_volume_shape_law(acceptance):
    rng = np.random.default_rng(0x54)
    start = time.perf_counter()
    configs = [(32, 32, 3, 1, 1)]
    while len(configs) < 20:
        configs.append(_geometry(rng))

    ok = 0
    for h, w, n, stride, padding in configs:
        out_h = conv_output_size(h, n, stride, padding)
        out_w = conv_output_size(w, n, stride, padding)
        key_in, key_out = _keys(rng, h, w, out_h, out_w)
        vol = derive_conv_offsets(key_in, key_out, ConvParams(n, stride, padding, 1, 1))
        ok += vol.values.shape == (out_h, out_w, 2 * n * n)

    head = configs[0]
    head_vol = derive_conv_offsets(
        generate_key(32, 32, 1), generate_key(32, 32, 2), ConvParams(3, 1, 1, 1, 1))
    elapsed = time.perf_counter() - start
    acceptance("offset volume shape law",
               ok == len(configs) and head_vol.values.shape == (32, 32, 18),
               f"{ok}/{len(configs)} configs, incl. {head[0]}x{head[1]} n=3 "
               f"pad=1 -> 32x32x18",
               elapsed, 5.0)


def test_invertibility_and_formats(acceptance, tmp_path):
    rng = np.random.default_rng(0x1F)
    start = time.perf_counter()

    roundtrips = 0
    for _ in range(100):
        c = int(rng.integers(1, 4))
        h = int(rng.integers(1, 17))
        w = int(rng.integers(1, 17))
        x = rand_image(rng, (c, h, w))
        key = generate_key(h, w, int(rng.integers(0, 2**64, dtype=np.uint64)))
        roundtrips += bitwise_equal(unshuffle(shuffle(x, key), key), x)

    key = generate_key(6, 5, 99)
    k1 = os.path.join(tmp_path, "a.pkey")
    k2 = os.path.join(tmp_path, "b.pkey")
    write_key(k1, key)
    write_key(k2, read_key(k1))
    key_exact = open(k1, "rb").read() == open(k2, "rb").read() and read_key(k2) == key

    t = rand_image(rng, (2, 4, 3))
    t1 = os.path.join(tmp_path, "a.tnsr")
    t2 = os.path.join(tmp_path, "b.tnsr")
    write_tensor(t1, t)
    write_tensor(t2, read_tensor(t1))
    tensor_exact = (open(t1, "rb").read() == open(t2, "rb").read()
                    and bitwise_equal(read_tensor(t2), t))

    src = os.path.join(tmp_path, "x.tnsr")
    enc = os.path.join(tmp_path, "x.enc.tnsr")
    dec = os.path.join(tmp_path, "x.dec.tnsr")
    write_tensor(src, rand_image(rng, (3, 6, 5)))
    kf = os.path.join(tmp_path, "k.pkey")
    write_key(kf, generate_key(6, 5, 123))
    cli_ok = (cli_main(["encrypt", "--key", kf, "--in", src, "--out", enc]) == 0
              and cli_main(["decrypt", "--key", kf, "--in", enc, "--out", dec]) == 0)
    cli_exact = cli_ok and open(src, "rb").read() == open(dec, "rb").read()

    elapsed = time.perf_counter() - start
    ok = roundtrips == 100 and key_exact and tensor_exact and cli_exact
    acceptance("invertibility and file formats",
               ok, f"{roundtrips}/100 shuffle round trips, key/tensor/CLI "
                   f"round trips byte-exact",
               elapsed, 10.0)


def test_fault_sensitivity(acceptance):
    rng = np.random.default_rng(0xFA)
    start = time.perf_counter()
    trials = 20
    localized = 0

    for _ in range(trials):
        model = fault_probe_model(rng, depth=int(rng.integers(2, 5)))
        _, h, w = model.input_dims
        key = generate_key(h, w, int(rng.integers(0, 2**64, dtype=np.uint64)))
        seed = int(rng.integers(0, 2**64, dtype=np.uint64))
        keyed = keyed_compile(model, key, seed)

        fault_layer = int(rng.choice(sorted(keyed.offsets)))
        values = keyed.offsets[fault_layer].values.copy()
        flat = values.reshape(-1)
        flat[int(rng.integers(0, flat.size))] += 1.0
        poked = KeyedModel(
            spec=keyed.spec,
            chain=keyed.chain,
            offsets={**keyed.offsets, fault_layer: OffsetVolume(values)},
            final_unshuffle=keyed.final_unshuffle,
            acquisition_key_grid=keyed.acquisition_key_grid,
        )

        report = equivalence_report(poked, rand_image(rng, model.input_dims))
        nonzero = [idx for idx, diff in report.per_layer_diffs if diff > 0.0]
        localized += (not report.bitwise_equal
                      and bool(nonzero) and nonzero[0] == fault_layer)

    elapsed = time.perf_counter() - start
    acceptance("fault sensitivity of offsets",
               localized == trials,
               f"{localized}/{trials} single +1 perturbations broke equality "
               f"and were localized by per-layer diffs",
               elapsed, 30.0)
