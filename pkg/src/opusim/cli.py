"""Command-line entry point: train, attack, ablate, transfer, report,
cost-model. Every run is driven by a YAML manifest (flags can override
the common attack knobs) and writes its resolved manifest, CSV tables and
plots into the output directory.

Normalization convention: white-box budgets are expressed in the units of
the dataset's declared range, so eps = 8/256 in [0,1] corresponds to
eps = 16/256 after renormalizing to [-1,1]. Manifests state the range
explicitly; nothing is rescaled behind the caller's back.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, reporting
from .blackbox import BanditsConfig, NesConfig, ParsimoniousConfig, csr_curve
from .data import digits_dataset, load_cifar_binary, load_idx, split
from .errors import OpusimError, ValidationError
from .harness import (ArchConfig, VariantSpec, build_common_correct_set,
                      retrieval_cost_estimate, run_ablation,
                      run_blackbox_attack, train_variant, transfer_eval,
                      whitebox_accuracy_table)
from .manifest import (Manifest, load_manifest, normalization_range,
                       validate_manifest)
from .whitebox import (GradSource, WhiteBoxBudget, accuracy_under_attack,
                       whitebox_records)


def _load_dataset(manifest: Manifest):
    ds_cfg = manifest["dataset"]
    rng = normalization_range(ds_cfg["normalization"])
    source = ds_cfg["source"]
    if source == "digits":
        full = digits_dataset(pixel_range=rng)
    elif source == "idx":
        full = load_idx(ds_cfg["images"], ds_cfg["labels"], pixel_range=rng)
    else:
        full = load_cifar_binary(ds_cfg["path"], pixel_range=rng)
    return split(full, ds_cfg["n_train"], ds_cfg["n_test"],
                 seed=manifest.seeds["data"])


def _arch_from(manifest: Manifest, num_classes: int, input_shape):
    model_cfg = manifest["model"]
    return ArchConfig(input_shape=tuple(input_shape),
                      conv_channels=tuple(model_cfg["conv_channels"]),
                      hidden=model_cfg["hidden"],
                      defense_dim=model_cfg["defense_dim"],
                      num_classes=num_classes)


def _trained_model(manifest: Manifest, train_ds, outdir: Path, tag=None,
                   init_seed=None, data_seed=None, save_as="model.npz"):
    model_cfg = manifest["model"]
    if tag is None and model_cfg["checkpoint"]:
        return checkpoint.load_checkpoint(model_cfg["checkpoint"])
    tag = tag or model_cfg["variant"]
    arch = _arch_from(manifest, train_ds.num_classes, train_ds.images.shape[1:])
    quant = 8 if model_cfg["opu_quantize"] == "8bit" else None
    model, result = train_variant(
        VariantSpec(tag, arch), train_ds,
        epochs=manifest["train"]["epochs"], lr=manifest["train"]["lr"],
        batch_size=manifest["train"]["batch_size"],
        seed=manifest.seeds["data"] if data_seed is None else data_seed,
        init_seed=manifest.seeds["model"] if init_seed is None else init_seed,
        opu_seed=manifest.seeds["opu"],
        feedback_seed=manifest.seeds["feedback"],
        entry_scale=model_cfg["entry_scale"], quantize_bits=quant)
    if result.status != "ok":
        raise OpusimError(f"training {tag} diverged")
    if save_as:
        checkpoint.save_checkpoint(model, outdir / save_as)
        reporting.write_csv(outdir / f"history_{tag}.csv",
                            ["epoch", "loss", "accuracy"], result.history)
    return model


def _prepare_outdir(manifest: Manifest, override=None) -> Path:
    outdir = Path(override) if override else manifest.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    manifest.write_resolved(outdir / "resolved_manifest.yaml")
    return outdir


def _write_meta(outdir: Path, started: float, extra=None) -> None:
    meta = {"started_unix": started, "duration_s": time.time() - started}
    meta.update(extra or {})
    (outdir / "run_meta.json").write_text(json.dumps(meta, indent=2,
                                                     sort_keys=True))


def cmd_train(manifest: Manifest, outdir_override=None) -> int:
    started = time.time()
    outdir = _prepare_outdir(manifest, outdir_override)
    train_ds, test_ds = _load_dataset(manifest)
    model = _trained_model(manifest, train_ds, outdir)
    acc = model.accuracy(test_ds.images, test_ds.labels)
    reporting.write_csv(outdir / "test_accuracy.csv",
                        ["variant", "test_accuracy"],
                        [{"variant": manifest["model"]["variant"],
                          "test_accuracy": acc}])
    _write_meta(outdir, started, {"test_accuracy": acc})
    print(f"trained {manifest['model']['variant']}: test accuracy {acc:.4f}")
    return 0


def _blackbox_config(attack_cfg: dict, name: str, sigma=None):
    if name == "nes":
        return NesConfig(sigma=sigma or attack_cfg["sigma"],
                         n_samples=attack_cfg["n_samples"],
                         antithetic=attack_cfg["antithetic"],
                         batch=attack_cfg["batch"],
                         step_size=attack_cfg["step_size"])
    if name == "bandits":
        return BanditsConfig(sigma=sigma or attack_cfg["sigma"],
                             online_lr=attack_cfg["online_lr"],
                             exploration=attack_cfg["exploration"],
                             prior_size=attack_cfg["prior_size"],
                             grad_iters=attack_cfg["grad_iters"],
                             image_step=attack_cfg["image_step"])
    return ParsimoniousConfig(epsilon=attack_cfg["eps"],
                              local_search_iters=attack_cfg["local_search_iters"],
                              init_block_size=attack_cfg["init_block_size"],
                              batch=attack_cfg["block_batch"])


def _attack_samples(model, test_ds, limit):
    preds = np.concatenate([model.predict(test_ds.images[lo:lo + 256])
                            for lo in range(0, len(test_ds), 256)])
    idx = np.flatnonzero(preds == test_ds.labels)[:limit]
    if idx.size == 0:
        raise ValidationError("model classifies no test sample correctly")
    return idx


def cmd_attack(manifest: Manifest, outdir_override=None) -> int:
    started = time.time()
    outdir = _prepare_outdir(manifest, outdir_override)
    train_ds, test_ds = _load_dataset(manifest)
    model = _trained_model(manifest, train_ds, outdir)
    attack_cfg = manifest["attack"]
    name = attack_cfg["name"]

    if name in ("pgd", "fgsm"):
        # White-box runs evaluate the unfiltered test set, so the eps=0
        # row is the natural accuracy.
        grid = attack_cfg["eps_grid"] or [attack_cfg["eps"]]
        if 0.0 not in grid:
            grid = [0.0] + list(grid)
        steps = 1 if name == "fgsm" else attack_cfg["steps"]
        source = GradSource(attack_cfg["grad_source"],
                            bpda_temperature=attack_cfg["bpda_temperature"],
                            surrogate_seed=attack_cfg["surrogate_seed"]
                            or manifest.seeds["attack"])
        n = attack_cfg["n_attack_samples"]
        images = test_ds.images[:n]
        labels = test_ds.labels[:n]
        rows, sample_rows = [], []
        violations = 0
        for eps in grid:
            if eps == 0:
                preds = model.predict(images)
                rows.append({"epsilon": 0.0,
                             "accuracy": float(np.mean(preds == labels))})
                continue
            alpha = eps if name == "fgsm" else attack_cfg["alpha"]
            budget = WhiteBoxBudget(epsilon=eps, alpha=alpha, steps=steps,
                                    pixel_range=test_ds.pixel_range)
            records = whitebox_records(model, source, images, labels, budget)
            rows.append({"epsilon": float(eps),
                         "accuracy": accuracy_under_attack(records)})
            violations += sum(not r.feasible for r in records)
            for r in records:
                sample_rows.append({"epsilon": float(eps), "index": r.index,
                                    "label": r.label,
                                    "pred_before": r.pred_before,
                                    "pred_after": r.pred_after,
                                    "linf": r.linf,
                                    "success": int(r.success),
                                    "feasible": int(r.feasible)})
        reporting.write_csv(outdir / "fig3_whitebox.csv",
                            ["epsilon", "accuracy"], rows)
        reporting.write_csv(outdir / "records.csv",
                            ["epsilon", "index", "label", "pred_before",
                             "pred_after", "linf", "success", "feasible"],
                            sample_rows)
        reporting.plot_accuracy_vs_eps(outdir / "fig3_whitebox.csv",
                                       outdir / "fig3_whitebox.png")
        _write_meta(outdir, started, {"rows": len(rows),
                                      "feasibility_violations": violations})
        print(f"white-box {name} ({attack_cfg['grad_source']}): " + ", ".join(
            f"eps={r['epsilon']:.4g} acc={r['accuracy']:.3f}" for r in rows))
        return 0

    sweep = attack_cfg["sigma_sweep"] or [attack_cfg["sigma"]]
    if name == "parsimonious":
        sweep = [attack_cfg["sigma"]]  # sigma is meaningless here
    idx = _attack_samples(model, test_ds, attack_cfg["n_attack_samples"])
    images, labels = test_ds.images[idx], test_ds.labels[idx]
    best = None
    sweep_rows = []
    for sigma in sweep:
        cfg = _blackbox_config(attack_cfg, name, sigma=sigma)
        outcomes = run_blackbox_attack(
            model, images, labels, name, cfg, attack_cfg["eps"],
            max_queries=attack_cfg["max_queries"],
            attack_seed=manifest.seeds["attack"],
            pixel_range=test_ds.pixel_range)
        queries, fractions = csr_curve(outcomes,
                                       max_queries=attack_cfg["max_queries"])
        final = float(fractions[-1])
        sweep_rows.append({"sigma": sigma, "final_csr": final})
        if best is None or final > best[1]:
            best = (sigma, final, outcomes, (queries, fractions))
    sigma, final, outcomes, (queries, fractions) = best
    reporting.write_csv(outdir / "fig4_csr.csv", ["variant", "queries", "csr"],
                        reporting.csr_rows(name, queries, fractions))
    reporting.plot_csr(outdir / "fig4_csr.csv", outdir / "fig4_csr.png")
    if len(sweep) > 1:
        reporting.write_csv(outdir / "sigma_sweep.csv",
                            ["sigma", "final_csr"], sweep_rows)
    out_rows = []
    violations = 0
    budget_breaches = 0
    for pos, out in enumerate(outcomes):
        linf = float(np.max(np.abs(out.x_adv - images[pos]))) \
            if out.x_adv is not None else 0.0
        violations += out.ledger.violations
        budget_breaches += int(out.ledger.count > out.ledger.max_queries)
        out_rows.append({"sample_index": int(idx[pos]),
                         "label": int(labels[pos]),
                         "first_success_query": out.first_success_query,
                         "queries_used": out.queries_used,
                         "linf": linf,
                         "success": int(out.success)})
    reporting.write_csv(outdir / "outcomes.csv",
                        ["sample_index", "label", "first_success_query",
                         "queries_used", "linf", "success"], out_rows)
    _write_meta(outdir, started, {"sigma": sigma, "final_csr": final,
                                  "feasibility_violations": violations,
                                  "budget_violations": budget_breaches})
    print(f"{name}: final CSR {final:.3f} over {len(outcomes)} samples "
          f"(sigma={sigma})")
    return 0


def cmd_ablate(manifest: Manifest, outdir_override=None) -> int:
    started = time.time()
    outdir = _prepare_outdir(manifest, outdir_override)
    train_ds, test_ds = _load_dataset(manifest)
    attack_cfg = manifest["attack"]
    tags = manifest["ablation"]["tags"]
    models = {}
    for tag in tags:
        models[tag] = _trained_model(manifest, train_ds, outdir, tag=tag,
                                     save_as=f"model_{tag.replace('+', '_')}.npz")
    cfg = _blackbox_config(attack_cfg, attack_cfg["name"])
    records, curves = run_ablation(
        models, test_ds, attack_cfg["name"], cfg, attack_cfg["eps"],
        n_samples=attack_cfg["n_attack_samples"],
        max_queries=attack_cfg["max_queries"],
        attack_seed=manifest.seeds["attack"],
        accuracy_band=manifest["ablation"]["accuracy_band"])
    rows = []
    for tag in tags:
        rows += reporting.csr_rows(tag, *curves[tag])
    reporting.write_csv(outdir / "fig6_fig7_ablation.csv",
                        ["variant", "queries", "csr"], rows)
    reporting.plot_csr(outdir / "fig6_fig7_ablation.csv",
                       outdir / "fig6_fig7_ablation.png")
    finals = {tag: float(curves[tag][1][-1]) for tag in tags}
    violations = sum(sum(o.get("violations", 0) for o in rec.outcomes)
                     for rec in records)
    _write_meta(outdir, started, {"final_csr": finals,
                                  "feasibility_violations": violations})
    print("ablation final CSR: " + ", ".join(f"{t}={v:.3f}"
                                             for t, v in finals.items()))
    return 0


def cmd_transfer(manifest: Manifest, outdir_override=None) -> int:
    started = time.time()
    outdir = _prepare_outdir(manifest, outdir_override)
    train_ds, test_ds = _load_dataset(manifest)
    attack_cfg = manifest["attack"]
    source = _trained_model(manifest, train_ds, outdir, tag="VANILLA",
                            save_as="model_source.npz")
    # Targets share the source's initialization recipe but train on a
    # different data order: the attacker's replica is similar to the
    # target, and only the training rule separates the two targets.
    targets = {}
    for tag in manifest["transfer"]["targets"]:
        targets[f"target_{tag}"] = _trained_model(
            manifest, train_ds, outdir, tag=tag,
            data_seed=manifest["transfer"]["target_data_seed"],
            save_as=f"model_target_{tag.replace('+', '_')}.npz")
    tset = build_common_correct_set(source, list(targets.values()), test_ds,
                                    limit=manifest["transfer"]["n_common"])
    grid = attack_cfg["eps_grid"] or [0.0, attack_cfg["eps"]]
    if 0.0 not in grid:
        grid = [0.0] + list(grid)
    stats: dict = {}
    rows = transfer_eval(source, targets, tset, grid,
                         steps=attack_cfg["steps"], alpha=attack_cfg["alpha"],
                         pixel_range=test_ds.pixel_range, stats=stats)
    fields = ["epsilon", "source"] + sorted(targets)
    reporting.write_csv(outdir / "fig5_transfer.csv", fields, rows)
    reporting.plot_accuracy_vs_eps(outdir / "fig5_transfer.csv",
                                   outdir / "fig5_transfer.png")
    _write_meta(outdir, started, {"common_set": len(tset),
                                  "feasibility_violations":
                                      stats.get("violations", 0)})
    print(f"transfer on {len(tset)} common samples across "
          f"{len(grid)} epsilon values")
    return 0


def cmd_report(manifest: Manifest, outdir_override=None) -> int:
    started = time.time()
    outdir = _prepare_outdir(manifest, outdir_override)
    cfg = manifest["report"]
    if not cfg["inputs"]:
        raise ValidationError("report.inputs is empty")
    for path in cfg["inputs"]:
        stem = Path(path).stem
        if cfg["kind"] == "csr":
            reporting.plot_csr(path, outdir / f"{stem}.png")
        else:
            reporting.plot_accuracy_vs_eps(path, outdir / f"{stem}.png")
    _write_meta(outdir, started)
    print(f"rendered {len(cfg['inputs'])} plot(s) into {outdir}")
    return 0


def cmd_cost_model(manifest: Manifest) -> int:
    cfg = manifest["cost_model"]
    est = retrieval_cost_estimate(cfg["n"], cfg["m"], cfg["err"])
    print(f"retrieval time: {est.minutes:.1f} minutes ({est.hours:.2f} hours)")
    print(f"matrix storage: {est.storage_bytes:.3e} bytes "
          f"({est.terabytes:.3f} TB)")
    return 0


def _kv_pairs(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValidationError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip().lower()] = float(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opusim",
        description="defense simulator and adversarial attack benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "attack", "ablate", "transfer", "report"):
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True)
        p.add_argument("--output-dir", default=None)
        if name == "attack":
            p.add_argument("--attack", dest="attack_name",
                           choices=["pgd", "fgsm", "nes", "bandits",
                                    "parsimonious"])
            p.add_argument("--grad-source", choices=["bp", "dfa", "bpda"])
            p.add_argument("--eps", type=float)
            p.add_argument("--alpha", type=float)
            p.add_argument("--steps", type=int)
            p.add_argument("--seed", type=int)
            p.add_argument("--max-queries", type=int)
            p.add_argument("--sigma-sweep", type=float, nargs="+")
    p = sub.add_parser("cost-model")
    p.add_argument("pairs", nargs="*",
                   help="N=<input dim> M=<output dim> err=<relative error>")
    p.add_argument("--manifest", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "cost-model":
            if args.manifest:
                manifest = load_manifest(args.manifest)
            else:
                kv = _kv_pairs(args.pairs)
                doc = {"command": "cost-model", "cost_model": {
                    "n": kv.get("n", 1e4), "m": kv.get("m", 1e5),
                    "err": kv.get("err", 0.32)}}
                manifest = validate_manifest(doc)
            return cmd_cost_model(manifest)
        manifest = load_manifest(args.manifest)
        if manifest.command != args.command:
            raise ValidationError(
                f"manifest command {manifest.command!r} does not match "
                f"subcommand {args.command!r}")
        if args.command == "attack":
            overrides = {"name": args.attack_name,
                         "grad_source": args.grad_source, "eps": args.eps,
                         "alpha": args.alpha, "steps": args.steps,
                         "max_queries": args.max_queries,
                         "sigma_sweep": args.sigma_sweep}
            for key, value in overrides.items():
                if value is not None:
                    manifest["attack"][key] = value
            if args.seed is not None:
                manifest.seeds["attack"] = args.seed
        handler = {"train": cmd_train, "attack": cmd_attack,
                   "ablate": cmd_ablate, "transfer": cmd_transfer,
                   "report": cmd_report}[args.command]
        return handler(manifest, outdir_override=args.output_dir)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except OpusimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
