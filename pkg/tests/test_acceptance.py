"""The ten acceptance criteria, each at its stated tolerance.

Every test records a ``criterion N: PASS/FAIL`` line that pytest prints in
its terminal summary, then asserts the criterion.
"""

import numpy as np

import oracles
from advkit import analysis as an
from advkit import autodiff as ad
from advkit.attacks import AttackConfig, attack
from advkit.autodiff import Tensor
from advkit.config import config_from_dict, parse_config
from advkit.io import ResultRow, read_cifar10_binary, write_results
from advkit.losses import LossConfig, attack_loss, cross_entropy, cw_loss, dlr_loss, scale_logits
from advkit.model import Classifier, load_weights, save_weights

EPS = 8 / 255


def run(model, data, kind, n=None, sigma=0.0, **kw):
    x, y = data.inputs[:n], data.labels[:n]
    return attack(model, x, y, AttackConfig(loss=LossConfig(kind=kind, sigma=sigma), **kw))


def rate(outcomes):
    return float(np.mean([o.success for o in outcomes]))


def within_ball(x_adv, x, eps):
    x = np.asarray(x, dtype=x_adv.dtype)
    ulp = np.spacing(np.maximum(np.abs(x), np.abs(x_adv))).astype(np.float64)
    return bool(np.all(np.abs(x_adv.astype(np.float64) - x.astype(np.float64)) <= eps + ulp))


# -- 1 ---------------------------------------------------------------------

GRADIENT_CASES = {
    "CE": (lambda t, y, g: cross_entropy(t, [y]), lambda v, y, g: oracles.ce(v, y)),
    "CW": (lambda t, y, g: cw_loss(t, [y]), lambda v, y, g: oracles.cw(v, y)),
    "DLR": (lambda t, y, g: dlr_loss(t, [y]), lambda v, y, g: oracles.dlr(v, y)),
    "L2Scaled": (lambda t, y, g: attack_loss(t, [y], LossConfig(kind="l2-scaled")),
                 lambda v, y, g: oracles.l2_scaled(v, y)),
    "Jitter": (lambda t, y, g: attack_loss(t, [y], LossConfig(kind="jitter", sigma=0.0), gamma=Tensor(g[None])),
               lambda v, y, g: oracles.jitter(v, y, g)),
}


def test_criterion_1_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    worst, count = {}, 150
    for name, (graph, ref) in GRADIENT_CASES.items():
        worst[name] = 0.0
        for _ in range(count):
            c = int(rng.integers(3, 11))
            z, y = rng.normal(size=c) * rng.uniform(0.1, 5), int(rng.integers(c))
            g = rng.normal(size=5) * 0.05
            grad = ad.grad(lambda t: ad.sum_(graph(t, y, g)), z[None])[0]
            fd = oracles.central_difference(lambda v: ref(v, y, g), z, h=1e-4, points=5)
            worst[name] = max(worst[name], ad.relative_error(grad, fd, floor=oracles.FD_FLOOR))
    ok = all(v < 1e-5 for v in worst.values())
    verdict(1, ok, f"{count} float64 instances per loss, max relative error "
            + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert ok


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_scale_shift_invariance(verdict):
    rng = np.random.default_rng(7)
    failures = []
    for _ in range(200):
        # float32-valued logits and factors make every product c*z exact in float64
        z = (rng.normal(size=(1, 10)) * 3).astype(np.float32).astype(np.float64)
        y = [int(rng.integers(10))]
        base = scale_logits(z).data
        for c in (1e-3, 1.0, 1e3):
            c = float(np.float32(c))
            if not np.array_equal(scale_logits(c * z).data, base):
                failures.append(("scale_logits", c))
        shift = float(rng.normal() * 10)
        for name, fn in (("CE", cross_entropy), ("CW", cw_loss), ("DLR", dlr_loss)):
            if abs(fn(z + shift, y).item() - fn(z, y).item()) > 1e-9:
                failures.append((name, "shift", shift))
        spread = np.sort(z[0])[-1] - np.sort(z[0])[-3]
        for c in (1e-3, 1.0, 1e3):
            a, b = dlr_loss(c * z, y).item(), dlr_loss(z, y).item()
            # the 1e-12 stabiliser in the denominator is not scaled with z
            floor = abs(b) * 1e-12 * abs(1 / (c * spread) - 1 / spread)
            if abs(a - b) > 1e-9 + floor:
                failures.append(("DLR", "scale", c))
    verdict(2, not failures, f"200 logit vectors, {len(failures)} violations")
    assert not failures


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_gradient_obfuscation(blob_desk, verdict):
    base = blob_desk.model
    obf = base.with_logit_scale(1e4)
    data = blob_desk.test
    kw = dict(engine="pgd", iterations=100, epsilon=EPS, seed=11)
    clean_error = float(np.mean(obf.predict_labels(data.inputs) != data.labels))
    ce = run(obf, data, "ce", **kw)
    grads = [obf.input_gradient(x, lambda z, y=y: ad.sum_(cross_entropy(z, [y]))) for x, y in zip(data.inputs, data.labels)]
    zero_grads = float(np.mean([not np.any(g) for g in grads]))
    jit_obf = run(obf, data, "jitter", sigma=0.1, **kw)
    jit_base = run(base, data, "jitter", sigma=0.1, **kw)
    same = [o.success for o in jit_obf] == [o.success for o in jit_base]
    accuracy = {k: 1 - rate(run(obf, data, k, **kw)) for k in ("ce", "ce-scaled", "l2-scaled", "jitter")}
    acc = list(accuracy.values())
    monotone = all(b <= a for a, b in zip(acc, acc[1:]))
    ok = rate(ce) == clean_error and same and monotone
    verdict(3, ok, f"CE success {rate(ce):.3f} vs clean error {clean_error:.3f} ({zero_grads:.0%} zero CE gradients); "
            f"Jitter success scaled {rate(jit_obf):.3f} vs unscaled {rate(jit_base):.3f} identical={same}; "
            "ablation accuracy " + " -> ".join(f"{k} {v:.3f}" for k, v in accuracy.items()))
    assert ok


# -- 4 ---------------------------------------------------------------------

def linear_instances(count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        c, d = int(rng.choice([2, 3])), int(rng.integers(1, 4))
        W, b = rng.normal(size=(c, d)), rng.normal(size=c) * 0.3
        x, eps = rng.uniform(0, 1, d), float(rng.uniform(0, 0.3))
        y = int(np.argmax(W @ x + b))
        yield Classifier([W], [b], dtype=np.float64), W, b, x, y, eps


def test_criterion_4_linear_oracle(verdict):
    mismatches, sound = [], True
    instances = list(linear_instances(500, 0))
    for i, (model, W, b, x, y, eps) in enumerate(instances):
        cfg = AttackConfig(loss=LossConfig(kind="cw"), engine="pgd", iterations=100, epsilon=eps, seed=i)
        got = attack(model, x[None], [y], cfg)[0].success
        want = oracles.linear_attack_succeeds(W, b, x, y, eps)
        sound &= want or not got
        if got != want:
            mismatches.append((i, W.shape, round(eps, 4), want))
    ok = not mismatches
    verdict(4, ok, f"{len(instances)} linear instances, {len(mismatches)} disagreements with the corner oracle "
            f"(attack never succeeds where the oracle fails: {sound}); " + "; ".join(
                f"#{i} classes x dim {s} eps {e} oracle={w}" for i, s, e, w in mismatches))
    assert sound
    assert ok


# -- 5 ---------------------------------------------------------------------

def test_criterion_5_feasibility_and_determinism(blob_desk, fragile_adversarial, tmp_path, verdict):
    checked, infeasible = 0, 0
    for desk in (blob_desk, fragile_adversarial):
        for kind in ("ce", "cw", "dlr", "jitter"):
            for engine in ("pgd", "apgd"):
                for o, x in zip(run(desk.model, desk.test, kind, n=100, sigma=0.1, engine=engine,
                                    iterations=30, seed=3), desk.test.inputs):
                    checked += 1
                    inside = within_ball(o.x_adv, x, EPS) and o.x_adv.min() >= 0 and o.x_adv.max() <= 1
                    infeasible += not inside

    def artifacts(threads, name):
        outs = run(fragile_adversarial.model, fragile_adversarial.test, "jitter", sigma=0.1,
                   iterations=30, seed=9, chunk_size=16, threads=threads)
        rows = [ResultRow.from_outcome(i, o, "jitter", "m", 9) for i, o in enumerate(outs)]
        write_results(rows, tmp_path / f"{name}.csv")
        return np.stack([o.x_adv for o in outs]).tobytes() + (tmp_path / f"{name}.csv").read_bytes()

    serial, again, parallel = artifacts(1, "a"), artifacts(1, "b"), artifacts(4, "c")
    deterministic = serial == again == parallel
    ok = infeasible == 0 and deterministic
    verdict(5, ok, f"{checked - infeasible}/{checked} adversarial examples feasible; "
            f"repeated and 4-thread runs byte-identical={deterministic}")
    assert ok


# -- 6 ---------------------------------------------------------------------

def test_criterion_6_norm_minimisation(fragile_adversarial, verdict):
    desk = fragile_adversarial
    kw = dict(seed=21)
    means = {}
    for kind in ("ce", "cw", "dlr", "jitter"):
        hits = an.attacked_successes(run(desk.model, desk.test, kind, sigma=0.1 if kind == "jitter" else 0.0, **kw))
        means[kind] = float(np.mean([o.l2_norm for o in hits])) if hits else float("nan")
    tracked = run(desk.model, desk.test, "jitter", sigma=0.1, **kw)
    untracked = run(desk.model, desk.test, "jitter", sigma=0.1, track_best=False, **kw)
    both = [(a.l2_norm, b.l2_norm) for a, b in zip(tracked, untracked) if a.success and b.success]
    per_sample = all(a <= b for a, b in both)
    smaller = all(means["jitter"] < means[k] for k in ("ce", "cw", "dlr"))
    ok = smaller and per_sample
    verdict(6, ok, "mean l2 of successful perturbations " + ", ".join(f"{k}={v:.4f}" for k, v in means.items())
            + f"; tracked <= untracked on {len(both)} shared successes={per_sample}")
    assert ok


# -- 7 ---------------------------------------------------------------------

def test_criterion_7_monotonicity(blob_desk, fragile_standard, fragile_adversarial, verdict):
    details, ok = [], True
    for desk in (blob_desk, fragile_standard, fragile_adversarial):
        for kind in ("cw", "jitter"):
            kw = dict(sigma=0.1 if kind == "jitter" else 0.0, iterations=50, seed=13)
            untracked = rate(run(desk.model, desk.test, kind, track_best=False, **kw))
            by_restarts = [rate(run(desk.model, desk.test, kind, restarts=r, **kw)) for r in (1, 2, 3)]
            good = by_restarts[0] >= untracked and by_restarts == sorted(by_restarts)
            ok &= good
            details.append(f"{desk.name}/{kind} untracked {untracked:.3f} restarts "
                           + "/".join(f"{r:.3f}" for r in by_restarts))
    verdict(7, ok, "; ".join(details))
    assert ok


# -- 8 ---------------------------------------------------------------------

def test_criterion_8_diversity(fragile_adversarial, verdict):
    desk = fragile_adversarial
    C = desk.test.num_classes
    dlr = an.confusion(run(desk.model, desk.test, "dlr", seed=5), C, "binarized")
    jit = an.confusion(run(desk.model, desk.test, "jitter", sigma=0.1, seed=5), C, "binarized")
    pairs = C * (C - 1)
    applicable = dlr.off_diagonal_nonzero < pairs
    ok = applicable and jit.off_diagonal_nonzero >= dlr.off_diagonal_nonzero
    verdict(8, ok, f"{desk.name}: nonzero off-diagonal entries Jitter {jit.off_diagonal_nonzero} vs "
            f"DLR {dlr.off_diagonal_nonzero} of {pairs}\nDLR binarized:\n{dlr.counts}\nJitter binarized:\n{jit.counts}")
    assert ok


# -- 9 ---------------------------------------------------------------------

def test_criterion_9_analysis_identities(blob_desk, fragile_standard, fragile_adversarial, verdict):
    desks = (blob_desk, fragile_standard, fragile_adversarial)
    test = blob_desk.test
    C, n = test.num_classes, len(test)
    failures = []
    per_model = []
    for desk in desks:
        outs = run(desk.model, test, "jitter", sigma=0.1, iterations=30, seed=17)
        per_model.append(outs)
        full = an.confusion(outs, C, "all").counts
        mis = an.confusion(outs, C, "misclassified-only").counts
        binary = an.confusion(outs, C, "binarized").counts
        if full.sum() != n or np.diag(mis).any() or not np.array_equal(binary, (mis > 0).astype(int)):
            failures.append(f"{desk.name} confusion")
        if not np.array_equal(full.sum(axis=1), np.bincount([o.clean_pred for o in outs], minlength=C)):
            failures.append(f"{desk.name} confusion rows")
        for x in test.inputs[:20]:
            m = an.csm(desk.model, x).matrix
            if not (np.array_equal(m, m.T) and np.all(np.diag(m) == 1) and np.all(np.abs(m) <= 1)):
                failures.append(f"{desk.name} csm")
        for o, x in zip(outs, test.inputs):
            if not o.success or o.l2_norm == 0:
                continue
            gamma = o.x_adv.astype(np.float64) - x
            curve = an.landscape(desk.model, x, gamma, o.label, np.linalg.norm(gamma), 5)
            end = cw_loss(desk.model.logits(o.x_adv[None]), [o.label]).item()
            if abs(curve.values[-1] - end) > 1e-4 * max(1.0, abs(end)):
                failures.append(f"{desk.name} landscape")
    part = an.partition_robustness(per_model)
    hist = part.histogram
    if hist.sum() != n or part.robust.size + part.non_robust.size + part.intermediate.size != n:
        failures.append("partition")
    verdict(9, not failures, f"{len(desks)} models x {n} samples, partition histogram {hist.tolist()}, "
            f"violations: {failures or 'none'}")
    assert not failures


# -- 10 --------------------------------------------------------------------

def test_criterion_10_round_trips(blob_desk, tmp_path, verdict):
    m = blob_desk.model
    save_weights(m, tmp_path / "m.advf")
    loaded = load_weights(tmp_path / "m.advf")
    save_weights(loaded, tmp_path / "m2.advf")
    weights_ok = ((tmp_path / "m.advf").read_bytes() == (tmp_path / "m2.advf").read_bytes()
                  and all(a.tobytes() == b.tobytes() for a, b in zip(m.weights + m.biases, loaded.weights + loaded.biases)))

    cfg = config_from_dict({"seed": 4, "models": [{"id": "a", "path": "a.advf", "logit_scale": 1e4}],
                            "attack": {"losses": ["ce", "jitter"], "sigma": 0.15, "tune_sigma": True}})
    (tmp_path / "c.json").write_text(cfg.dumps())
    parsed = parse_config(tmp_path / "c.json")
    config_ok = parsed == cfg and parsed.dumps() == cfg.dumps()

    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, 7)
    pixels = rng.integers(0, 256, (7, 3072))
    raw = b"".join(bytes([int(l)]) + p.astype(np.uint8).tobytes() for l, p in zip(labels, pixels))
    (tmp_path / "fixture.bin").write_bytes(raw)
    ds = read_cifar10_binary(tmp_path / "fixture.bin")
    cifar_ok = (len(raw) == 7 * 3073 and ds.inputs.dtype == np.float32
                and np.array_equal(ds.labels, labels)
                and np.array_equal(ds.inputs, pixels.astype(np.float32) / np.float32(255)))
    ok = weights_ok and config_ok and cifar_ok
    verdict(10, ok, f"weights bit-exact={weights_ok}, config bit-exact={config_ok}, CIFAR fixture exact={cifar_ok}")
    assert ok
