"""Command-line entry point: train, eval, ood, analyze, ablate.

Every command writes its artifacts plus a manifest (config snapshot,
seeds, format versions, content hash) into the output directory, enough
to reproduce the run. CSVs are UTF-8 with a header row and '.' decimals;
plots are static PNGs rendered from the sibling CSV.

Exit codes: 0 ok, 2 config error, 3 artifact error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import backend
from .agent import TransformerAgent
from .analysis import (
    ABLATION_AXES,
    collect_pca,
    collect_refinement,
    run_ablation,
)
from .autodiff import EvaluationError
from .checkpoint import (
    FORMAT_VERSION,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, dump_config, load_config
from .envs import VELOCITY_OOD_RANGE, make_env
from .training import (
    Adam,
    NumericFailure,
    meta_test,
    meta_train,
    ood_eval,
)
from . import rng as rngmod
from .envs import sample_tasks

MANIFEST_VERSION = 1


# -- artifact helpers --------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = path.read_text(encoding="utf-8").strip().split("\n")
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def content_hash(out_dir: Path, exclude: tuple[str, ...] = ("manifest.json",)) -> str:
    h = hashlib.sha256()
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(str(p.relative_to(out_dir)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, config_snapshot: dict, seeds: list[int], extra: dict | None = None) -> None:
    manifest = {
        "config": config_snapshot,
        "seeds": seeds,
        "format_versions": {"checkpoint": FORMAT_VERSION, "manifest": MANIFEST_VERSION},
        "backend": backend.ACTIVE,
        "content_hash": content_hash(out_dir),
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _plot_curves(csv_path: Path, png_path: Path, group_col: str, x_col: str, y_col: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, rows = read_csv(csv_path)
    gi, xi, yi = header.index(group_col), header.index(x_col), header.index(y_col)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    groups: dict[str, tuple[list, list]] = {}
    for row in rows:
        xs, ys = groups.setdefault(row[gi], ([], []))
        xs.append(float(row[xi]))
        ys.append(float(row[yi]))
    for label, (xs, ys) in groups.items():
        ax.plot(xs, ys, label=f"{group_col}={label}")
    ax.set_xlabel(x_col)
    ax.set_ylabel(y_col)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


# -- commands ----------------------------------------------------------------


def _env_dims(family: str) -> tuple[int, int]:
    spec = make_env(family).spec
    return spec.state_dim, spec.action_dim


def _build_agent(cfg: RunConfig, seed: int) -> TransformerAgent:
    obs_dim, action_dim = _env_dims(cfg.family)
    return TransformerAgent(
        cfg.encoder,
        obs_dim,
        action_dim,
        head_hidden=cfg.head_hidden,
        init_log_std=cfg.init_log_std,
        value_scale=cfg.value_scale,
        seed=seed,
    )


def _train_kwargs(cfg: RunConfig) -> dict:
    return dict(
        tasks_per_batch=cfg.tasks_per_batch,
        episodes_per_task=cfg.episodes_per_task,
        horizon=cfg.horizon,
        eval_interval=cfg.eval_interval,
        eval_tasks=cfg.eval_tasks,
        train_range=cfg.train_range,
        stop_return=cfg.stop_return,
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.dry_run:
        print("resolved configuration:")
        print(dump_config(cfg), end="")
        return 0
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    curve_rows: list[tuple] = []
    resume_state = None
    if args.checkpoint:
        agent, extras, state = load_checkpoint(args.checkpoint)
        resume_state = (agent, extras, state)
        cfg.seeds = [int(state.get("seed", cfg.seeds[0]))]

    for seed in cfg.seeds:
        if resume_state is not None:
            agent, extras, state = resume_state
            optimizer = Adam(agent.params, cfg.ppo.learning_rate)
            optimizer.load_state_tensors(extras, int(state["adam_t"]))
            start_steps = int(state["steps"])
            start_iteration = int(state["iteration"])
        else:
            agent = _build_agent(cfg, seed)
            optimizer = None
            start_steps = 0
            start_iteration = 0
        result = meta_train(
            agent,
            cfg.family,
            cfg.ppo,
            cfg.total_timesteps,
            seed,
            optimizer=optimizer,
            start_steps=start_steps,
            start_iteration=start_iteration,
            on_eval=lambda row: print(
                f"seed {row.seed} steps {row.timesteps}: mean return {row.mean_return:.2f} "
                f"[{row.ci_lo:.2f}, {row.ci_hi:.2f}]"
            ),
            **_train_kwargs(cfg),
        )
        curve_rows += [
            (r.timesteps, r.mean_return, r.ci_lo, r.ci_hi, r.seed) for r in result.curve
        ]
        save_checkpoint(
            out_dir / f"checkpoint_seed{seed}.bin",
            result.agent,
            extra_tensors=result.optimizer.state_tensors(),
            trainer_state={
                "seed": seed,
                "steps": result.total_steps,
                "iteration": result.iterations,
                "adam_t": result.optimizer.t,
                "family": cfg.family,
                "horizon": cfg.horizon,
                "train_range": list(cfg.train_range) if cfg.train_range else None,
            },
        )
    write_csv(
        out_dir / "train_curve.csv",
        ["timesteps", "mean_return", "ci_lo", "ci_hi", "seed"],
        curve_rows,
    )
    (out_dir / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    write_manifest(out_dir, cfg.to_dict(), cfg.seeds)
    return 0


def _load_for_eval(args) -> tuple[TransformerAgent, dict, RunConfig]:
    agent, _, state = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
        cfg.family = state.get("family", "velocity")
        cfg.horizon = int(state.get("horizon", 64))
        if state.get("train_range"):
            cfg.train_range = tuple(state["train_range"])
    return agent, state, cfg


def cmd_eval(args) -> int:
    agent, _, cfg = _load_for_eval(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = cfg.train_range if cfg.train_range else (None, None)
    tasks = sample_tasks(cfg.family, cfg.eval_tasks, rngmod.stream(seed, "tasks.metatest"), lo, hi)
    returns, _ = meta_test(
        agent, cfg.family, tasks, cfg.eval_episodes, cfg.horizon, seed, "metatest"
    )
    rows = [
        (ti, ep, returns[ti, ep])
        for ti in range(len(tasks))
        for ep in range(cfg.eval_episodes)
    ]
    write_csv(out_dir / "adapt_curve.csv", ["task", "episode", "return"], rows)
    write_manifest(out_dir, cfg.to_dict(), [seed], {"command": "eval"})
    print(f"meta-test mean return: {returns.mean():.3f} over {len(tasks)} tasks")
    return 0


def cmd_ood(args) -> int:
    agent, _, cfg = _load_for_eval(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ood_range = cfg.ood_range or VELOCITY_OOD_RANGE
    tasks, returns, _ = ood_eval(
        agent,
        cfg.family,
        n_tasks=cfg.eval_tasks,
        episodes_per_task=cfg.eval_episodes,
        horizon=cfg.horizon,
        seed=seed,
        ood_range=ood_range,
    )
    rows = [
        (ti, ep, returns[ti, ep])
        for ti in range(len(tasks))
        for ep in range(cfg.eval_episodes)
    ]
    write_csv(out_dir / "ood_curve.csv", ["task", "episode", "return"], rows)
    write_manifest(out_dir, cfg.to_dict(), [seed], {"command": "ood", "ood_range": list(ood_range)})
    print(f"OOD mean return: {returns.mean():.3f} over tasks in {list(ood_range)}")
    return 0


def cmd_analyze(args) -> int:
    agent, _, cfg = _load_for_eval(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.kind == "refinement":
        if agent.config.n_layers < 2:
            raise ConfigError(
                f"refinement analysis needs >= 2 layers, checkpoint has {agent.config.n_layers}"
            )
        res = collect_refinement(
            agent,
            cfg.family,
            horizon=cfg.horizon,
            seed=seed,
            task_range=cfg.train_range,
        )
        grouped: dict[tuple[int, int, int], list[float]] = {}
        for r in res.records:
            grouped.setdefault((r.task, r.episode, r.layer), []).append(
                r.representation_error
            )
        rows = [
            (t, ep, l, float(np.median(errs)), res.probe_mse[l - 1])
            for (t, ep, l), errs in sorted(grouped.items())
        ]
        write_csv(
            out_dir / "refinement.csv",
            ["task", "episode", "layer", "repr_err", "probe_mse"],
            rows,
        )
        _plot_refinement(out_dir / "refinement.csv", out_dir / "refinement.png")
        write_manifest(
            out_dir,
            cfg.to_dict(),
            [seed],
            {
                "command": "analyze.refinement",
                "error_spearman": res.error_spearman,
                "probe_spearman": res.probe_spearman,
            },
        )
        print(
            f"spearman(layer, median repr err) = {res.error_spearman:.3f}, "
            f"spearman(layer, probe mse) = {res.probe_spearman:.3f}"
        )
    else:
        res = collect_pca(
            agent, cfg.family, horizon=cfg.horizon, seed=seed, task_range=cfg.train_range
        )
        rows = [
            (res.projections[i, 0], res.projections[i, 1], res.projections[i, 2], res.labels[i])
            for i in range(len(res.labels))
        ]
        write_csv(out_dir / "pca.csv", ["c1", "c2", "c3", "task_param"], rows)
        _plot_pca(out_dir / "pca.csv", out_dir / "pca.png")
        write_manifest(
            out_dir,
            cfg.to_dict(),
            [seed],
            {"command": "analyze.pca", "explained_ratio": [float(v) for v in res.explained_ratio]},
        )
        print(f"explained variance ratios: {np.round(res.explained_ratio, 4)}")
    return 0


def _plot_refinement(csv_path: Path, png_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, rows = read_csv(csv_path)
    li, ei, pi = header.index("layer"), header.index("repr_err"), header.index("probe_mse")
    layers = sorted({int(r[li]) for r in rows})
    med_err = [
        float(np.median([float(r[ei]) for r in rows if int(r[li]) == l])) for l in layers
    ]
    probe = [float(next(r[pi] for r in rows if int(r[li]) == l)) for l in layers]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].plot(layers, med_err, marker="o")
    axes[0].set_xlabel("layer")
    axes[0].set_ylabel("median representation error")
    axes[1].plot(layers, probe, marker="o", color="tab:orange")
    axes[1].set_xlabel("layer")
    axes[1].set_ylabel("probe test MSE")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def _plot_pca(csv_path: Path, png_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, rows = read_csv(csv_path)
    c1 = [float(r[0]) for r in rows]
    c2 = [float(r[1]) for r in rows]
    labels = [float(r[3]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 5))
    sc = ax.scatter(c1, c2, c=labels, s=8, cmap="viridis")
    fig.colorbar(sc, ax=ax, label="task parameter")
    ax.set_xlabel("c1")
    ax.set_ylabel("c2")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    obs_dim, action_dim = _env_dims(cfg.family)
    results = run_ablation(
        cfg.encoder,
        args.axis,
        cfg.family,
        cfg.ppo,
        cfg.total_timesteps,
        seeds,
        obs_dim,
        action_dim,
        head_hidden=cfg.head_hidden,
        **_train_kwargs(cfg),
    )
    combined: list[tuple] = []
    diverged: dict[str, list[int]] = {}
    for label, runs in results.items():
        sdir = out_dir / label.replace("=", "_")
        sdir.mkdir(exist_ok=True)
        rows = []
        for seed, res, note in runs:
            if res is None:
                diverged.setdefault(label, []).append(seed)
                continue
            rows += [
                (r.timesteps, r.mean_return, r.ci_lo, r.ci_hi, r.seed) for r in res.curve
            ]
            combined += [
                (label, r.timesteps, r.mean_return, r.ci_lo, r.ci_hi, r.seed)
                for r in res.curve
            ]
        write_csv(
            sdir / "train_curve.csv",
            ["timesteps", "mean_return", "ci_lo", "ci_hi", "seed"],
            rows,
        )
    combined_path = out_dir / f"ablation_{args.axis}.csv"
    write_csv(
        combined_path,
        ["setting", "timesteps", "mean_return", "ci_lo", "ci_hi", "seed"],
        combined,
    )
    _plot_curves(combined_path, out_dir / f"ablation_{args.axis}.png",
                 "setting", "timesteps", "mean_return")
    write_manifest(out_dir, cfg.to_dict(), seeds, {"command": f"ablate.{args.axis}", "diverged": diverged})
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memrl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required: bool, checkpoint: bool):
        if config_required:
            sp.add_argument("--config", required=True)
        else:
            sp.add_argument("--config", default=None)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        else:
            sp.add_argument("--checkpoint", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--dry-run", action="store_true", dest="dry_run")

    sp = sub.add_parser("train", help="meta-train per the config; writes checkpoints + curve")
    common(sp, True, False)
    sp = sub.add_parser("eval", help="frozen-parameter adaptation on held-out tasks")
    common(sp, False, True)
    sp = sub.add_parser("ood", help="adaptation on tasks outside the training range")
    common(sp, False, True)
    sp = sub.add_parser("analyze", help="refinement / pca analyses on a checkpoint")
    sp.add_argument("kind", choices=["refinement", "pca"])
    common(sp, False, True)
    sp = sub.add_parser("ablate", help="re-train along one encoder axis")
    sp.add_argument("axis", choices=sorted(ABLATION_AXES))
    common(sp, True, False)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "ood": cmd_ood,
        "analyze": cmd_analyze,
        "ablate": cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return 3
    except (NumericFailure, EvaluationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
