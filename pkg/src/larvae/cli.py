"""Command-line surface: dataset generation, training, sweeps, traversal,
gradient checks.

Run configs are flat key=value text files; unknown keys are errors and the
fully resolved config is echoed into the run directory. Exit codes: 0 ok,
1 check failure, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses, metrics, nn, train as train_mod
from .models import SemiVAE, model_from_checkpoint


class ConfigError(Exception):
    pass


# key -> (type, default); None default means the key is required
CONFIG_SCHEMA = {
    "dataset": (str, None),
    "out": (str, None),
    "iterations": (int, 20000),
    "batch_size": (int, 64),
    "learning_rate": (float, 1e-4),
    "eta": (float, 0.02),
    "seed": (int, 0),
    "eval_every": (int, 2000),
    "dim_z": (int, 5),
    "arch": (str, "mlp"),
    "disc_learning_rate": (float, 1e-4),
    "ru_kind": (str, "beta-tcvae"),
    "gamma_tc": (float, 4.0),
    "coef_mode": (str, "direct-alpha-tau"),
    "gamma": (float, 0.0),
    "lambda": (float, 0.5),
    "alpha": (float, 5.0),
    "tau": (float, 1.0),
    "sigma2": (float, 0.1),
    "eval_votes": (int, 800),
    "eval_batch_per_vote": (int, 64),
    "mig_bins": (int, 20),
}

SWEEP_KEYS = {"tau": float, "dim_z": int, "eta": float, "seed": int}


def parse_config_text(text):
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        typ, _ = CONFIG_SCHEMA[key]
        try:
            cfg[key] = typ(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad {typ.__name__} for {key!r}: {value!r}") from None
    return resolve_config(cfg)


def resolve_config(cfg):
    out = dict(cfg)
    for key, (typ, default) in CONFIG_SCHEMA.items():
        if key not in out:
            if default is None:
                raise ConfigError(f"missing required key {key!r}")
            out[key] = default
        else:
            out[key] = typ(out[key])
    return out


def config_lines(cfg):
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def train_config_from(cfg):
    loss = losses.SemiLossConfig(
        ru_kind=cfg["ru_kind"], gamma_tc=cfg["gamma_tc"], coef_mode=cfg["coef_mode"],
        gamma=cfg["gamma"], lam=cfg["lambda"], alpha=cfg["alpha"], tau=cfg["tau"],
        sigma2=cfg["sigma2"])
    return train_mod.TrainConfig(
        iterations=cfg["iterations"], batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"], eta=cfg["eta"], seed=cfg["seed"],
        eval_every=cfg["eval_every"], dim_z=cfg["dim_z"], arch=cfg["arch"],
        disc_learning_rate=cfg["disc_learning_rate"], loss=loss,
        eval_votes=cfg["eval_votes"], eval_batch_per_vote=cfg["eval_batch_per_vote"],
        mig_bins=cfg["mig_bins"])


def run_training(cfg, run_dir=None):
    """Execute one resolved config; returns the run directory."""
    run_dir = Path(run_dir if run_dir is not None else cfg["out"])
    dataset = data_mod.load_dataset(cfg["dataset"])
    tcfg = train_config_from(cfg)
    pool = data_mod.make_labeled_pool(dataset, cfg["eta"], seed=cfg["seed"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved-config.txt").write_text(config_lines(cfg))
    train_mod.train(dataset, pool, tcfg, out_dir=run_dir)
    return run_dir


def _run_sweep_value(payload):
    cfg, run_dir = payload
    run_training(cfg, run_dir)
    rows = train_mod.read_history_csv(Path(run_dir) / "metrics.csv")
    return rows[-1]["mig"], rows[-1]["l2"]


# ---------------------------------------------------------------------------
# gradient-check suite (used by `larvae gradcheck` and the acceptance tests)


def _op_case(kind, rng):
    """Build (f, params) exercising one op kind on random small shapes.

    f is scalarized by projecting the op output onto a frozen random vector
    so every output element contributes to the checked gradient.
    """

    def t(shape, lo=-1.0, hi=1.0):
        return ad.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    def away_from(shape, gap=0.05):
        # keep values off the relu kink so finite differences stay clean
        v = rng.uniform(gap, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
        return ad.Tensor(v, requires_grad=True)

    shape = tuple(int(s) for s in rng.integers(2, 5, size=int(rng.integers(1, 4))))
    if kind in ("add", "sub", "mul", "div"):
        a = t(shape)
        b = t(shape) if kind != "div" else ad.Tensor(
            rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape), requires_grad=True)
        op = lambda: ad.forward_op(kind, a, b)
        params = [a, b]
    elif kind == "scalar-mul":
        a = t(shape)
        c = float(rng.uniform(-2, 2))
        op = lambda: ad.scalar_mul(a, c)
        params = [a]
    elif kind == "matmul":
        n, m, k = (int(v) for v in rng.integers(2, 5, size=3))
        a, b = t((n, m)), t((m, k))
        op = lambda: ad.matmul(a, b)
        params = [a, b]
    elif kind == "conv2d":
        ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        kern = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        side = int(rng.integers(kern, kern + 4))
        x, w = t((2, ci, side, side)), t((co, ci, kern, kern))
        b = t((co,))
        op = lambda: ad.conv2d(x, w, b, stride=stride, padding=pad)
        params = [x, w, b]
    elif kind == "transposed-conv2d":
        ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        stride = int(rng.integers(1, 3))
        kern = int(rng.integers(stride, 5))
        pad = int(rng.integers(0, (kern - stride) // 2 + 1))
        side = int(rng.integers(2, 5))
        x, w = t((2, ci, side, side)), t((ci, co, kern, kern))
        b = t((co,))
        op = lambda: ad.conv_transpose2d(x, w, b, stride=stride, padding=pad)
        params = [x, w, b]
    elif kind == "relu":
        a = away_from(shape)
        op = lambda: ad.relu(a)
        params = [a]
    elif kind in ("exp", "square", "sigmoid", "softplus"):
        a = t(shape)
        op = lambda: ad.forward_op(kind, a)
        params = [a]
    elif kind in ("log", "sqrt"):
        a = ad.Tensor(rng.uniform(0.3, 2.0, shape), requires_grad=True)
        op = lambda: ad.forward_op(kind, a)
        params = [a]
    elif kind in ("sum", "mean"):
        a = t(shape)
        axis = None if rng.random() < 0.3 else int(rng.integers(len(shape)))
        op = lambda: ad.forward_op(kind, a, axis=axis)
        params = [a]
    elif kind == "broadcast":
        a = t(shape)
        target = (int(rng.integers(2, 4)),) + shape
        op = lambda: ad.broadcast(a, target)
        params = [a]
    elif kind == "reshape":
        a = t(shape)
        op = lambda: ad.reshape(a, (-1,))
        params = [a]
    elif kind == "concat":
        a, b = t(shape), t(shape)
        op = lambda: ad.concat_last(a, b)
        params = [a, b]
    elif kind == "slice":
        last = shape[-1]
        lo = int(rng.integers(0, last))
        hi = int(rng.integers(lo + 1, last + 1))
        a = t(shape)
        op = lambda: ad.slice_last(a, lo, hi)
        params = [a]
    elif kind == "logsumexp":
        a = t(shape)
        axis = int(rng.integers(len(shape)))
        op = lambda: ad.logsumexp(a, axis=axis)
        params = [a]
    else:
        raise ValueError(f"no grad-check case for op {kind!r}")
    proj = ad.constant(rng.standard_normal(op().shape))
    return (lambda: ad.tensor_sum(ad.mul(op(), proj))), params


def _jitter(params, rng, scale=0.2):
    # move off the zero-bias init: exact relu kinks there break finite differences
    for t in params.values():
        t.data = t.data + rng.normal(0.0, scale, t.data.shape)


def _tiny_model(rng, dim_z=2):
    model = SemiVAE((1, 2, 3), dim_y=2, dim_z=dim_z, sigma2=0.1, arch="mlp",
                    hidden=(5, 4), seed=np.random.default_rng(rng.integers(2 ** 63)))
    _jitter(model.parameters(), rng)
    return model


def _loss_cases(rng):
    """Named scalar losses over tiny models with frozen noise."""
    batch = 3
    model = _tiny_model(rng)
    x = ad.constant(rng.uniform(0, 1, (batch, 1, 2, 3)))
    y = rng.uniform(-1, 1, (batch, 2))
    eps = rng.standard_normal((batch, 4))
    eps_z = rng.standard_normal((batch, 2))
    params = model.parameters()

    cases = {}
    mean_vec = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    cases["gaussian_kl"] = (lambda: losses.gaussian_kl(mean_vec, 0.7), [mean_vec])
    mean_t = ad.Tensor(rng.uniform(0, 1, (batch, 6)), requires_grad=True)
    xt = ad.constant(rng.uniform(0, 1, (batch, 6)))
    cases["gaussian_nll"] = (lambda: losses.gaussian_nll(xt, mean_t, 0.5), [mean_t])
    cases["elbo"] = (lambda: ad.add(*losses.elbo_loss(model, x, eps)[:2]), params)
    mu_y = ad.Tensor(rng.standard_normal((batch, 2)), requires_grad=True)
    cases["label_recon"] = (lambda: losses.label_recon_loss(mu_y, ad.constant(y)), [mu_y])
    cases["label_replacement"] = (
        lambda: losses.label_replacement_loss(model, x, y, eps_z), params)

    lat = ad.Tensor(rng.standard_normal((8, 3)), requires_grad=True)
    mus = ad.Tensor(rng.standard_normal((8, 3)), requires_grad=True)
    cases["tc_mws"] = (
        lambda: losses.tc_estimate_mws(lat, mus, 0.1, 100), {"latents": lat, "means": mus})

    disc = train_mod.Discriminator(3, 1e-3, seed=np.random.default_rng(rng.integers(2 ** 63)),
                                   hidden=6)
    _jitter(disc.params, rng)
    lat2 = ad.Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    tc_params = dict(disc.params)
    tc_params["latents"] = lat2
    cases["tc_adversarial"] = (
        lambda: losses.tc_estimate_adversarial(lat2, disc.spec, disc.params), tc_params)

    disc4 = train_mod.Discriminator(4, 1e-3, seed=np.random.default_rng(rng.integers(2 ** 63)),
                                    hidden=6)
    _jitter(disc4.params, rng)
    for kind in ("beta-vae", "beta-tcvae", "factorvae"):
        cfg = losses.SemiLossConfig(ru_kind=kind, gamma_tc=1.5, alpha=0.7, tau=0.9,
                                    sigma2=0.1)
        m2 = _tiny_model(rng)

        def full(m2=m2, cfg=cfg, kind=kind):
            nll, kl, ru, sample = losses.unsup_loss(
                m2, x, eps, cfg, 50, disc=(disc4.spec, disc4.params) if kind == "factorvae" else None)
            gy_l, gz_l = m2.encode(x)
            recon = losses.label_recon_loss(gy_l.mean, ad.constant(y))
            rep = losses.rep_from_posterior(m2, x, y, gz_l, eps_z)
            return losses.compose_semi_loss(nll, kl, ru, recon, rep, cfg).node

        cases[f"semi_loss[{kind}]"] = (full, m2.parameters())
    return cases


def gradcheck_suite(instances=20, fault=None, seed=1234):
    """Finite-difference checks for every op kind and loss term.

    Returns a list of (name, max_rel_err, tol, passed). The step is 1e-6 for
    the model-based losses so relu kink crossings under perturbation stay
    rare. `fault` perturbs the analytic gradient of the named op to exercise
    the failure path.
    """
    results = []
    for j, kind in enumerate(ad.op_kinds()):
        worst = 0.0
        for i in range(instances):
            f, params = _op_case(kind, np.random.default_rng([seed, j, i]))
            report = ad.grad_check(f, params, step=1e-5, tol=1e-4)
            worst = max(worst, report.worst)
        if fault == kind:
            worst += 1.0
        results.append((f"op {kind}", worst, 1e-4, worst <= 1e-4))
    names = list(_loss_cases(np.random.default_rng(seed)))
    for j, name in enumerate(names):
        worst = 0.0
        for i in range(instances):
            f, params = _loss_cases(np.random.default_rng([seed + 1, j, i]))[name]
            tol = 1e-3 if "tc_" in name or "semi_loss" in name else 1e-4
            report = ad.grad_check(f, params, step=1e-6, tol=tol)
            worst = max(worst, report.worst)
        if fault == name:
            worst += 1.0
        results.append((f"loss {name}", worst, tol, worst <= tol))
    return results


# ---------------------------------------------------------------------------
# image output (PGM/PPM, no compression)


def write_image(pixels, path):
    """pixels (C,H,W) in [0,1] -> binary PGM (1 channel) or PPM (3 channels)."""
    pixels = np.asarray(pixels)
    c, h, w = pixels.shape
    quantized = np.rint(255.0 * np.clip(pixels, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as f:
        if c == 1:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(quantized[0].tobytes())
        elif c == 3:
            f.write(f"P6\n{w} {h}\n255\n".encode())
            f.write(quantized.transpose(1, 2, 0).tobytes())
        else:
            raise ValueError(f"cannot write {c}-channel image")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    if args.preset not in data_mod.PRESETS:
        print(f"error: unknown preset {args.preset!r} "
              f"(have {', '.join(sorted(data_mod.PRESETS))})", file=sys.stderr)
        return 2
    dataset = data_mod.generate(args.preset, seed=args.seed)
    data_mod.save_dataset(dataset, args.out)
    print(f"wrote {args.out}: {len(dataset)} items, "
          f"{dataset.num_factors} factors, image {dataset.spec.image_shape}")
    return 0


def cmd_train(args):
    cfg = parse_config_text(Path(args.config).read_text())
    run_dir = run_training(cfg)
    print(f"run complete: {run_dir}")
    return 0


def cmd_sweep(args):
    base = parse_config_text(Path(args.config).read_text())
    typ = SWEEP_KEYS[args.key]
    try:
        values = [typ(v) for v in args.values.split(",")]
    except ValueError:
        raise ConfigError(f"bad value list for {args.key!r}: {args.values!r}") from None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    if args.key == "seed" and seeds:
        raise ConfigError("--seeds cannot be combined with a seed sweep")
    sweep_dir = Path(base["out"]) / f"sweep_{args.key}"
    jobs = []
    for v in values:
        for s in (seeds or [None]):
            cfg = dict(base)
            cfg[args.key] = v
            name = f"{args.key}={v}"
            if s is not None:
                cfg["seed"] = s
                name += f"_seed{s}"
            run_dir = sweep_dir / name
            cfg["out"] = str(run_dir)
            jobs.append((v, (resolve_config(cfg), run_dir)))
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as ex:
            finals = list(ex.map(_run_sweep_value, [j for _, j in jobs]))
    else:
        finals = [_run_sweep_value(j) for _, j in jobs]
    per_value = {}
    for (v, _), (m, l) in zip(jobs, finals):
        per_value.setdefault(v, []).append((m, l))
    sweep_dir.mkdir(parents=True, exist_ok=True)
    with open(sweep_dir / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["value", "mig_mean", "mig_std", "l2_mean", "l2_std", "runs"])
        for v in values:
            migs = np.array([m for m, _ in per_value[v]])
            l2s = np.array([l for _, l in per_value[v]])
            w.writerow([v, repr(migs.mean()), repr(migs.std()),
                        repr(l2s.mean()), repr(l2s.std()), len(migs)])
    print(f"sweep complete: {sweep_dir / 'summary.csv'}")
    return 0


def cmd_traverse(args):
    dataset = data_mod.load_dataset(args.dataset)
    model = model_from_checkpoint(args.checkpoint, dataset.spec.image_shape,
                                  dataset.num_factors)
    grid = train_mod.traverse(model, dataset, args.item, args.dim, args.steps)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if dataset.spec.image_shape[0] == 1 else "ppm"
    for step, cell in enumerate(grid):
        write_image(cell, out_dir / f"trav_{args.item}_{args.dim}_{step}.{ext}")
    strip = np.concatenate(list(grid), axis=2)
    write_image(strip, out_dir / f"trav_{args.item}_{args.dim}_strip.{ext}")
    print(f"wrote {len(grid)} cells + strip to {out_dir}")
    return 0


def cmd_gradcheck(args):
    results = gradcheck_suite(instances=args.instances, fault=args.fault)
    failed = []
    for name, worst, tol, passed in results:
        status = "PASS" if passed else "FAIL"
        print(f"{status} {name}: max rel err {worst:.3e} (tol {tol:g})")
        if not passed:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="larvae",
                                description="semi-supervised disentanglement lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a procedural dataset to a file")
    g.add_argument("--preset", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run one training config")
    t.add_argument("config")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="run a config once per sweep value")
    s.add_argument("config")
    s.add_argument("--key", required=True, choices=sorted(SWEEP_KEYS))
    s.add_argument("--values", required=True, help="comma-separated list")
    s.add_argument("--seeds", default=None, help="optional comma-separated seed list")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_sweep)

    tr = sub.add_parser("traverse", help="decode a label traversal to images")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--item", type=int, required=True)
    tr.add_argument("--dim", type=int, required=True)
    tr.add_argument("--steps", type=int, default=5)
    tr.add_argument("--out", required=True)
    tr.set_defaults(fn=cmd_traverse)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--fault", default=None, help=argparse.SUPPRESS)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except losses.NonFiniteLossError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
