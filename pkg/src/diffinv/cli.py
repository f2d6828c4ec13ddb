"""Command line front end.

Exit status: 0 success, 2 configuration error, 3 numerical divergence or
solver failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .container import config_hash, read_container, write_container
from .enki import EnkiConfig, enki_run
from .errors import ConfigError, DataIOError, DiffinvError, DivergenceError
from .forward import EllipticTrue, Observation, SurrogateModel, assemble_operators, solve_pde, surrogate_error, \
    surrogate_train
from .metrics import block_iou, fid, summarize
from .neural import score_backbone, surrogate_backbone
from .numerics import RngStream
from .plotting import heatmap_grid, line_plot, write_pgm
from .prior import BlockPriorSpec, sample_prior
from .sampler import SampleSet, SamplerConfig, sample_posterior, sample_unconditional
from .score import Learned, dsm_train
from .sde import SdeSpec
from .tweedie import ETA_EXP, ETA_OFF, ScheduleConfig

log = logging.getLogger("diffinv")

# stream ids keep every random consumer independent of the others
S_PRIOR, S_SCORE_INIT, S_SCORE_TRAIN, S_SURR_DATA, S_SURR_INIT, S_SURR_TRAIN, S_NOISE, S_ENKI = range(10, 18)


class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.out = Path(cfg["out"])
        self.hash = config_hash(cfg)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataIOError(f"cannot create output directory {self.out}: {exc}") from exc

    @property
    def stamp(self):
        return {"config_hash": self.hash, "seed": self.seed}

    def rng(self, stream):
        return RngStream(self.seed, stream)

    def path(self, name):
        return self.out / name

    def csv(self, name, header, rows):
        path = self.path(name)
        try:
            with open(path, "w", newline="") as fh:
                fh.write(f"# config_hash={self.hash} seed={self.seed}\n")
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
        except OSError as exc:
            raise DataIOError(f"cannot write {path}: {exc}") from exc
        return path

    def report(self, **kv):
        print(" ".join(f"{k}={v}" for k, v in kv.items()))

    # shared pieces ---------------------------------------------------------

    def prior_spec(self):
        p = self.cfg["prior"]
        return BlockPriorSpec(grid=tuple(self.cfg["grid"]), background=p["background"], block=p["block"],
                              p_two=p["p_two"], p_left=p["p_left"], p_right=p["p_right"],
                              size_min=p["size_min"], size_max=p["size_max"])

    def sde(self):
        return SdeSpec.from_dict(self.cfg["sde"])

    def ops(self):
        H, W = self.cfg["grid"]
        return assemble_operators(W, H, traction=self.cfg["forward"]["traction"])

    def score_path(self):
        return Path(self.cfg["score"]["checkpoint"] or self.path(f"score_{self.sde().kind}.bin"))

    def surrogate_path(self):
        return Path(self.cfg["surrogate"]["checkpoint"] or self.path("surrogate.bin"))

    def load_score(self):
        path = self.score_path()
        if not path.exists():
            raise DataIOError(f"score checkpoint {path} not found; run train-score first")
        model, _ = Learned.load(path)
        if model.spec.kind != self.sde().kind:
            raise ConfigError(f"checkpoint {path} was trained for {model.spec.kind}")
        return model

    def true_model(self):
        f = self.cfg["forward"]
        model = EllipticTrue(self.ops(), f["kind"], f["nu"], f["solver"])
        return _Parallel(model, int(self.cfg["workers"]))

    def forward_model(self):
        if self.cfg["forward"]["model"] == "true":
            return self.true_model(), None
        if self.cfg["forward"]["model"] != "surrogate":
            raise ConfigError("forward.model must be 'surrogate' or 'true'")
        path = self.surrogate_path()
        if not path.exists():
            raise DataIOError(f"surrogate checkpoint {path} not found; run train-surrogate first")
        model = SurrogateModel.load(path)
        sig = model.meta.get("sigma_model")
        return model, (np.asarray(sig) if sig is not None else None)

    def sample_set(self, path):
        path = Path(path)
        if not path.exists():
            raise DataIOError(f"sample file {path} not found")
        return SampleSet.load(path)

    def r_value(self):
        r = self.cfg["sampler"]["r"]
        return float(r) if r is not None else config_mod.R_DEFAULT[self.sde().kind]


class _Parallel:
    """Evaluate a per-sample forward model over row batches with a thread pool."""

    def __init__(self, model, workers):
        self.model, self.workers = model, max(1, workers)
        self.n_in, self.n_obs = model.n_in, model.n_obs

    def _map(self, fn, *cols):
        if self.workers == 1 or len(cols[0]) == 1:
            return np.stack([fn(*a) for a in zip(*cols)])
        with ThreadPoolExecutor(self.workers) as ex:
            return np.stack(list(ex.map(fn, *cols)))

    def apply(self, mu):
        mu = np.atleast_2d(mu)
        return self._map(lambda m: self.model.apply(m), mu)

    def vjp(self, mu, r):
        mu, r = np.atleast_2d(mu), np.atleast_2d(r)
        return self._map(lambda m, q: self.model.vjp(m, q), mu, r)

    def solve(self, mu):
        return self._map(lambda m: self.model.solve(m), np.atleast_2d(mu))


# -- commands -----------------------------------------------------------------


def cmd_generate_prior(run: Run, args):
    spec = run.prior_spec()
    n = int(run.cfg["prior"]["n"])
    if n < 1:
        raise ConfigError("prior.n must be >= 1")
    S = sample_prior(spec, n, run.rng(S_PRIOR))
    S.meta.update(run.stamp)
    path = S.save(run.path("prior.bin"), extra_header=run.stamp)
    k = min(int(run.cfg["prior"]["n_preview"]), n)
    fig = heatmap_grid(list(S.images()[:k]), run.path("prior_preview.svg"), ncols=6,
                       suptitle=f"prior samples (seed {run.seed})")
    run.report(command="generate-prior", samples=n, file=path, preview=fig)


def cmd_train_score(run: Run, args):
    sc = run.cfg["score"]
    data_path = Path(sc["data"] or run.path("prior.bin"))
    S = run.sample_set(data_path)
    spec_p = run.prior_spec()
    offset, scale = spec_p.background, spec_p.block - spec_p.background
    X = (S.fields - offset) / scale
    spec = run.sde()
    dtype = np.dtype(sc["dtype"])
    start, adam, net = 0, None, None
    if sc["resume"]:
        prev, adam = Learned.load(sc["resume"], dtype=dtype)
        net, start = prev.net, int(prev.meta.get("epochs", 0))
        if prev.spec.kind != spec.kind:
            raise ConfigError("resume checkpoint belongs to a different SDE family")
    else:
        net = score_backbone(tuple(run.cfg["grid"]), sc["channels"], sc["n_freq"], rng=run.rng(S_SCORE_INIT),
                             dtype=dtype)
    model, hist, adam = dsm_train(X, spec, net, int(sc["epochs"]), run.rng(S_SCORE_TRAIN),
                                  batch_size=sc["batch_size"], lr=sc["lr"], t_eps=sc["t_eps"],
                                  grid_shape=tuple(run.cfg["grid"]), offset=offset, scale=scale,
                                  adam=adam, start_epoch=start)
    model.meta.update(run.stamp)
    ckpt = model.save(run.score_path(), adam=adam)
    epochs = list(range(start + 1, start + len(hist) + 1))
    run.csv(f"loss_{spec.kind}.csv", ["epoch", "loss"], [[e, f"{v:.8e}"] for e, v in zip(epochs, hist)])
    line_plot(epochs, [hist], run.path(f"loss_{spec.kind}.svg"), xlabel="epoch", ylabel="DSM loss", logy=True)
    run.report(command="train-score", family=spec.kind, epochs=model.meta["epochs"], final_loss=f"{hist[-1]:.5f}",
               checkpoint=ckpt)


def cmd_train_surrogate(run: Run, args):
    sc = run.cfg["surrogate"]
    if run.cfg["forward"]["kind"] != "dirichlet":
        raise ConfigError("the surrogate is trained for the dirichlet forward kind")
    spec_p = run.prior_spec()
    rng = run.rng(S_SURR_DATA)
    mu_sl = sample_prior(spec_p, sc["n_sl"], rng.split(0)).fields
    mu_ul = sample_prior(spec_p, sc["n_ul"], rng.split(1)).fields
    mu_val = sample_prior(spec_p, sc["n_val"], rng.split(2)).fields
    true = run.true_model()
    u_sl = true.solve(mu_sl)
    y_val = true.apply(mu_val)
    write_container(run.path("surrogate_data.bin"), {"kind": "dataset", "grid": run.cfg["grid"], **run.stamp},
                    [("mu", mu_sl), ("u", u_sl)])
    ops = run.ops()
    net = surrogate_backbone(tuple(run.cfg["grid"]), sc["channels"], dilations=sc["dilations"],
                             rng=run.rng(S_SURR_INIT), dtype=np.float32)
    model, hist = surrogate_train(mu_sl, u_sl, mu_ul, net, ops, sc["n_pt"], sc["n_st"], run.rng(S_SURR_TRAIN),
                                  batch_size=sc["batch_size"], lr=sc["lr"], w_ul=sc["w_ul"],
                                  in_offset=spec_p.background, in_scale=spec_p.block - spec_p.background)
    sigma, rel = surrogate_error(model, mu_val, y_val)
    model.meta.update({"sigma_model": sigma.tolist(), "val_rel_error": rel, **run.stamp})
    ckpt = model.save(run.surrogate_path())
    rows = [[e + 1, f"{v:.8e}", f"{hist['ul'][e - sc['n_pt']]:.8e}" if e >= sc["n_pt"] else ""]
            for e, v in enumerate(hist["sl"])]
    run.csv("surrogate_loss.csv", ["epoch", "supervised", "energy"], rows)
    run.csv("surrogate_error.csv", ["obs_index", "rms_error"], [[i, f"{s:.8e}"] for i, s in enumerate(sigma)])
    run.report(command="train-surrogate", val_rel_error=f"{rel:.4f}", checkpoint=ckpt)


def _truth(run: Run):
    inv = run.cfg["inverse"]
    k = int(inv["truth_index"])
    S = sample_prior(run.prior_spec(), k + 1, RngStream(int(inv["truth_seed"])))
    return S.fields[k]


def _unconditional(run: Run, score, spec, r, n_samples=None):
    sp = run.cfg["sampler"]
    scfg = SamplerConfig(n_samples or sp["n_samples"], sp["n_steps"], sp["K"], r, seed=run.seed,
                         step_norm=sp["step_norm"])
    return sample_unconditional(score, spec, scfg, grid_shape=tuple(run.cfg["grid"]))


def cmd_sample(run: Run, args):
    if getattr(args, "conditional", False):
        return cmd_invert(run, args)
    spec = run.sde()
    score = run.load_score()
    r = run.r_value()
    S = _unconditional(run, score, spec, r)
    S.meta.update(run.stamp)
    path = S.save(run.path(f"samples_{spec.kind}.bin"), extra_header=run.stamp)
    heatmap_grid(list(S.images()[:24]), run.path(f"samples_{spec.kind}.svg"), ncols=6,
                 suptitle=f"{spec.kind} unconditional samples, r={r}")
    out = {"command": "sample", "family": spec.kind, "samples": len(S), "file": path}
    sweep = run.cfg["sampler"]["r_sweep"]
    if sweep:
        ref = run.sample_set(run.cfg["sampler"]["reference"] or run.path("prior.bin"))
        rows, vals = [], []
        for rv in sweep:
            Sr = _unconditional(run, score, spec, float(rv))
            d = fid(Sr, ref)
            rows.append([rv, f"{d:.6f}"])
            vals.append(d)
        run.csv(f"fid_vs_r_{spec.kind}.csv", ["r", "fid"], rows)
        line_plot([float(v) for v in sweep], [vals], run.path(f"fid_vs_r_{spec.kind}.svg"), xlabel="r",
                  ylabel="FID")
        out["best_r"] = sweep[int(np.argmin(vals))]
    run.report(**out)


def _schedule(run: Run, sigma_eps, sigma_model):
    sp = run.cfg["sampler"]
    spec = run.sde()
    eta_mode = sp["eta_mode"]
    if eta_mode == "auto":
        eta_mode = ETA_EXP if spec.is_vp else ETA_OFF
    return ScheduleConfig(sp["rho_mode"], eta_mode, float(sigma_eps), spec.T / sp["n_steps"],
                          spec.T, sigma_model if sp["use_model_error"] else None)


def cmd_invert(run: Run, args):
    spec = run.sde()
    score = run.load_score()
    fwd, sigma_model = run.forward_model()
    truth = _truth(run)
    y_clean = run.true_model().apply(truth)[0]
    spec_p = run.prior_spec()
    sp = run.cfg["sampler"]
    events, metrics_rows = [], []
    for k, sigma in enumerate(run.cfg["inverse"]["noise_levels"]):
        y = y_clean + sigma * run.rng(S_NOISE).split(k).normal(y_clean.shape)
        obs = Observation(y, fwd.indices if hasattr(fwd, "indices") else np.arange(y.size), sigma, sigma_model)
        tag = f"{spec.kind}_s{sigma:g}"
        write_container(run.path(f"observation_{tag}.bin"), {"kind": "observation", "sigma_eps": sigma, **run.stamp},
                        [("y", obs.y), ("indices", obs.indices), ("truth", truth)])
        scfg = SamplerConfig(sp["n_samples"], sp["n_steps"], sp["K"], run.r_value(), _schedule(run, sigma, sigma_model),
                             seed=run.seed, field_range=1.0, divergence_factor=sp["divergence_factor"],
                             step_norm=sp["step_norm"])
        try:
            S = sample_posterior(score, spec, fwd, obs, scfg, grid_shape=tuple(run.cfg["grid"]))
        except DivergenceError as exc:
            events.append([sigma, exc.context.get("step", ""), exc.context.get("chain", ""),
                           exc.context.get("max_abs", ""), str(exc)])
            run.report(command="invert", noise=sigma, status="diverged", detail=str(exc))
            continue
        S.meta.update(run.stamp)
        S.save(run.path(f"posterior_{tag}.bin"), extra_header=run.stamp)
        summ = summarize(S, fwd, obs)
        summ.write_csv(run.path(f"summary_{tag}.csv"))
        iou = block_iou(summ.mlaps, truth, spec_p.threshold)
        shape = tuple(run.cfg["grid"])
        heatmap_grid([truth.reshape(shape), summ.mean.reshape(shape), summ.mlaps.reshape(shape)],
                     run.path(f"posterior_{tag}.svg"), titles=["truth", "mean", "MLAPS"], ncols=3)
        heatmap_grid([summ.std.reshape(shape)], run.path(f"posterior_std_{tag}.svg"), titles=["std"], ncols=1)
        write_pgm(summ.mlaps.reshape(shape), run.path(f"mlaps_{tag}.pgm"))
        metrics_rows.append([sigma, f"{iou:.4f}", f"{summ.misfits.min():.6e}", f"{S.meta['max_abs']:.4f}"])
        run.report(command="invert", noise=sigma, status="ok", mlaps_iou=f"{iou:.3f}")
    run.csv(f"inverse_metrics_{spec.kind}.csv", ["sigma_eps", "mlaps_iou", "min_misfit", "max_abs_state"],
            metrics_rows)
    run.csv(f"divergence_events_{spec.kind}.csv", ["sigma_eps", "step", "chain", "max_abs", "message"], events)


def cmd_enki(run: Run, args):
    fwd, _ = run.forward_model()
    ref = sample_prior(run.prior_spec(), int(run.cfg["prior"]["n"]), run.rng(S_PRIOR)).fields
    ec = run.cfg["enki"]
    truth = _truth(run)
    y_clean = run.true_model().apply(truth)[0]
    shape = tuple(run.cfg["grid"])
    spec_p = run.prior_spec()
    for k, sigma in enumerate(run.cfg["inverse"]["noise_levels"]):
        y = y_clean + sigma * run.rng(S_NOISE).split(k).normal(y_clean.shape)
        cfg = EnkiConfig(ref.mean(axis=0), np.cov(ref.T), sigma, ec["J"], ec["iterations"], ec["alpha"])
        res = enki_run(fwd, y, cfg, run.rng(S_ENKI).split(k), grid_shape=shape)
        tag = f"s{sigma:g}"
        res.ensemble.meta.update(run.stamp)
        write_container(run.path(f"enki_mean_{tag}.bin"), {"kind": "enki_mean", **run.stamp}, [("mean", res.mean)])
        run.csv(f"enki_misfit_{tag}.csv", ["iteration", "misfit"], [[i, f"{m:.10e}"] for i, m in enumerate(res.misfit)])
        heatmap_grid([truth.reshape(shape), res.mean.reshape(shape)], run.path(f"enki_{tag}.svg"),
                     titles=["truth", "EnKI mean"], ncols=2)
        iou = block_iou(res.mean, truth, spec_p.threshold)
        run.report(command="enki", noise=sigma, final_misfit=f"{res.misfit[-1]:.5f}", mean_iou=f"{iou:.3f}")


def cmd_fid(run: Run, args):
    A, B = run.sample_set(args.a), run.sample_set(args.b)
    run.report(command="fid", a=args.a, b=args.b, fid=f"{fid(A, B):.6f}")


def cmd_summarize(run: Run, args):
    S = run.sample_set(args.samples)
    header, arrays = read_container(args.observation)
    fwd, sigma_model = run.forward_model()
    obs = Observation(arrays["y"], arrays["indices"].astype(int), header["sigma_eps"], sigma_model)
    summ = summarize(S, fwd, obs, args.d_neighbor)
    stem = Path(args.samples).stem
    summ.write_csv(run.path(f"summary_{stem}.csv"))
    shape = S.grid_shape or tuple(run.cfg["grid"])
    imgs = [summ.mean, summ.std, summ.mlaps, summ.ctm, summ.map_point]
    titles = ["mean", "std", "MLAPS", "CTM", "MAP"]
    if "truth" in arrays:
        imgs.insert(0, arrays["truth"])
        titles.insert(0, "truth")
    heatmap_grid([v.reshape(shape) for v in imgs], run.path(f"summary_{stem}.svg"), titles=titles, ncols=len(imgs))
    run.report(command="summarize", samples=len(S), mlaps_index=summ.indices["mlaps"],
               d_neighbor=f"{summ.d_neighbor:.4f}")


def cmd_print_defaults(run, args):
    sys.stdout.write(config_mod.dump_defaults())


COMMANDS = {
    "generate-prior": cmd_generate_prior,
    "train-score": cmd_train_score,
    "train-surrogate": cmd_train_surrogate,
    "sample": cmd_sample,
    "invert": cmd_invert,
    "enki": cmd_enki,
    "fid": cmd_fid,
    "summarize": cmd_summarize,
    "print-defaults": cmd_print_defaults,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="threads for independent forward solves")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="diffinv", description="Diffusion-model posterior sampling for inverse problems")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "sample":
            sp.add_argument("--conditional", action="store_true", help="sample the posterior instead of the prior")
        if name == "fid":
            sp.add_argument("a")
            sp.add_argument("b")
        if name == "summarize":
            sp.add_argument("--samples", required=True)
            sp.add_argument("--observation", required=True)
            sp.add_argument("--d-neighbor", type=float, default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "print-defaults":
            cmd_print_defaults(None, args)
            return 0
        cfg = config_mod.load_config(args.config, {"seed": args.seed, "out": args.out, "workers": args.workers})
        COMMANDS[args.command](Run(cfg), args)
    except DiffinvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
