"""Command-line entrypoint.

Exit codes: 0 success, 1 validation/configuration error (including unknown
flags), 2 runtime failure. Logs go to standard error; machine-readable
results go to files. All randomness derives from the single --seed value.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import click
import torch

from . import evaluation, pipeline, store
from .episodes import trim_idle_frames, validate_episode
from .evaluation import (PolicyAgent, RandomAgent, ScenarioSpec, ScriptedAgent,
                         default_scenarios, emit_report, evaluate,
                         parse_report_csv, quality_ablation, run_scaling_study)
from .expert import DiffusionConfig
from .lam import LamConfig, load_lam, train_lam
from .pipeline import PipelineConfig, TrainBudget, train_full_pipeline
from .planner import BackboneConfig
from .policy import PolicyConfig, load_policy, train_planner
from .seeding import derive_seed
from .world import SKILLS

logger = logging.getLogger("latact")


class ConfigFailure(Exception):
    """Bad input/config; maps to exit code 1."""


def _echo_config(out_dir: Path, command: str, params: dict) -> None:
    """Every output directory records the exact resolved configuration."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"command": command}
    for k, v in params.items():
        resolved[k] = str(v) if isinstance(v, Path) else v
    (out_dir / "config.json").write_text(
        json.dumps(resolved, indent=1, sort_keys=True) + "\n")


def _load_dataset(root: Path, quality: str | None = None):
    manifests = store.list_manifests(root)
    if quality:
        manifests = store.filter_by_quality(manifests, quality)
    if not manifests:
        raise ConfigFailure(f"no episodes found under {root}")
    return [trim_idle_frames(ep) for ep in pipeline.load_episodes(manifests)]


def _budget(epochs: int, batch_size: int, max_steps: int | None) -> TrainBudget:
    return TrainBudget(lam_epochs=epochs, lam_batch=batch_size,
                       lam_steps_per_epoch=max_steps, joint_epochs=epochs,
                       joint_batch=batch_size, joint_steps_per_epoch=max_steps)


def _config_defaults(ctx: click.Context, param: click.Parameter, value):
    """--config FILE: JSON whose keys become defaults for this subcommand."""
    if value is None:
        return None
    data = json.loads(Path(value).read_text())
    section = data.get(ctx.info_name, data)
    if not isinstance(section, dict):
        raise click.UsageError(f"config section for {ctx.info_name!r} must be an object")
    ctx.default_map = {**(ctx.default_map or {}), **section}
    return value


def config_option(f):
    return click.option("--config", type=click.Path(exists=True, dir_okay=False),
                        callback=_config_defaults, is_eager=True, expose_value=False,
                        help="JSON file supplying defaults for this subcommand.")(f)


@click.group()
def cli() -> None:
    """Latent-action policy toolkit: data, training, evaluation."""
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Data toolchain


@cli.command("gen-data")
@config_option
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True,
              envvar="LATACT_DATA_ROOT")
@click.option("--episodes", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--failure-rate", type=float, default=pipeline.FAILURE_RATE,
              show_default=True)
@click.option("--defects", is_flag=True,
              help="Inject data defects and flag episodes unverified.")
@click.option("--overwrite", is_flag=True)
def gen_data(out_dir: Path, episodes: int, seed: int, failure_rate: float,
             defects: bool, overwrite: bool) -> None:
    """Generate a scripted demonstration corpus."""
    if episodes <= 0 or seed < 0:
        raise ConfigFailure("--episodes must be positive and --seed non-negative")
    if not overwrite and out_dir.exists() and any(out_dir.iterdir()):
        raise ConfigFailure(f"{out_dir} is not empty; pass --overwrite to replace it")
    if defects:
        paths = pipeline.generate_defective_dataset(out_dir, episodes, seed,
                                                    overwrite=overwrite)
    else:
        paths = pipeline.generate_dataset(out_dir, episodes, seed,
                                          failure_rate=failure_rate,
                                          overwrite=overwrite)
    _echo_config(out_dir, "gen-data",
                 {"episodes": episodes, "seed": seed, "failure_rate": failure_rate,
                  "defects": defects})
    logger.info("wrote %d episodes under %s", len(paths), out_dir)


@cli.command()
@config_option
@click.argument("root", type=click.Path(exists=True, path_type=Path))
def validate(root: Path) -> None:
    """Check every stored episode; violations go to standard output."""
    manifests = store.list_manifests(root)
    if not manifests:
        raise ConfigFailure(f"no episodes found under {root}")
    bad = 0
    for m in manifests:
        try:
            episode = store.read_episode(m)
            report = validate_episode(episode)
        except Exception as exc:
            click.echo(f"{m.parent.name}: unreadable: {exc}")
            bad += 1
            continue
        for v in report.violations:
            click.echo(f"{report.episode_id}: {v.kind}: {v.detail}")
        bad += 0 if report.ok else 1
    if bad:
        raise ConfigFailure(f"{bad} of {len(manifests)} episodes invalid")
    click.echo(f"{len(manifests)} episodes ok")


@cli.command()
@config_option
@click.argument("root", type=click.Path(exists=True, path_type=Path))
@click.option("--eps", type=float, default=1e-3, show_default=True)
@click.option("--min-run", type=int, default=5, show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
def trim(root: Path, eps: float, min_run: int, out_dir: Path) -> None:
    """Trim boundary idle runs from every episode into a new store."""
    manifests = store.list_manifests(root)
    if not manifests:
        raise ConfigFailure(f"no episodes found under {root}")
    removed = 0
    for m in manifests:
        episode = store.read_episode(m)
        trimmed = trim_idle_frames(episode, eps=eps, min_run=min_run)
        removed += len(episode) - len(trimmed)
        store.write_episode(trimmed, out_dir, overwrite=True)
    _echo_config(out_dir, "trim", {"root": root, "eps": eps, "min_run": min_run})
    logger.info("trimmed %d idle frames across %d episodes", removed, len(manifests))


@cli.command()
@config_option
@click.argument("root", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
def stats(root: Path, out_path: Path) -> None:
    """Dataset statistics report (trajectory counts, durations, histograms)."""
    result = store.compute_stats(store.list_manifests(root))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    logger.info("stats for %d trajectories -> %s", result.trajectory_count, out_path)


# ---------------------------------------------------------------------------
# Training


@cli.group()
def train() -> None:
    """Train one stage (lam, planner) or stages 2+3 jointly (joint)."""


def train_options(f):
    for opt in reversed([
        click.option("--data", "data_root", type=click.Path(exists=True, path_type=Path),
                     required=True, envvar="LATACT_DATA_ROOT"),
        click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--epochs", type=int, default=6, show_default=True),
        click.option("--batch-size", type=int, default=32, show_default=True),
        click.option("--max-steps", type=int, default=None,
                     help="Cap on optimizer steps per epoch."),
    ]):
        f = opt(f)
    return f


@train.command("lam")
@config_option
@train_options
@click.option("--frame-gap", type=int, default=LamConfig.frame_gap, show_default=True)
def train_lam_cmd(data_root: Path, out_dir: Path, seed: int, epochs: int,
                  batch_size: int, max_steps: int | None, frame_gap: int) -> None:
    """Stage 1: latent action model."""
    episodes = _load_dataset(data_root)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = LamConfig(frame_gap=frame_gap)
    hist = train_lam(episodes, cfg, epochs=epochs, batch_size=batch_size,
                     seed=derive_seed(seed, "stage1"), max_steps_per_epoch=max_steps,
                     out_path=out_dir / "lam.ckpt")
    _echo_config(out_dir, "train lam",
                 {"data": data_root, "seed": seed, "epochs": epochs,
                  "batch_size": batch_size, "max_steps": max_steps,
                  "lam": asdict(cfg)})
    (out_dir / "history.json").write_text(json.dumps(
        {k: v for k, v in hist.items() if k != "model"}, indent=1) + "\n")
    logger.info("final val MSE %.5f perplexity %.2f",
                hist["val_mse"][-1], hist["perplexity"][-1])


@train.command("planner")
@config_option
@train_options
@click.option("--lam", "lam_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="Stage-1 checkpoint providing pseudo-labels.")
def train_planner_cmd(data_root: Path, out_dir: Path, seed: int, epochs: int,
                      batch_size: int, max_steps: int | None, lam_path: Path) -> None:
    """Stage 2: latent planner on frozen-LAM pseudo-labels."""
    episodes = _load_dataset(data_root)
    lam = load_lam(lam_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hist = train_planner(episodes, lam, BackboneConfig(), epochs=epochs,
                         batch_size=batch_size, seed=derive_seed(seed, "stage2"),
                         max_steps_per_epoch=max_steps,
                         out_path=out_dir / "planner.ckpt")
    _echo_config(out_dir, "train planner",
                 {"data": data_root, "seed": seed, "epochs": epochs,
                  "batch_size": batch_size, "max_steps": max_steps,
                  "lam": str(lam_path)})
    (out_dir / "history.json").write_text(json.dumps(
        {k: v for k, v in hist.items() if k != "model"}, indent=1) + "\n")
    logger.info("final val accuracy %.3f", hist["val_acc"][-1])


@train.command("joint")
@config_option
@train_options
@click.option("--lam", "lam_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--planner", "planner_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="Optional Stage-2 warm start.")
def train_joint_cmd(data_root: Path, out_dir: Path, seed: int, epochs: int,
                    batch_size: int, max_steps: int | None, lam_path: Path,
                    planner_path: Path | None) -> None:
    """Stages 2+3: planner and diffusion expert, LAM frozen."""
    from .planner import load_planner
    from .policy import joint_train
    episodes = _load_dataset(data_root)
    lam = load_lam(lam_path)
    planner_model = load_planner(planner_path) if planner_path else None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hist = joint_train(episodes, lam, BackboneConfig(), DiffusionConfig(),
                       PolicyConfig(), planner_model=planner_model, epochs=epochs,
                       batch_size=batch_size, seed=derive_seed(seed, "stage23"),
                       max_steps_per_epoch=max_steps,
                       out_path=out_dir / "policy.ckpt")
    _echo_config(out_dir, "train joint",
                 {"data": data_root, "seed": seed, "epochs": epochs,
                  "batch_size": batch_size, "max_steps": max_steps,
                  "lam": str(lam_path), "planner": str(planner_path)})
    (out_dir / "history.json").write_text(json.dumps(
        {k: v for k, v in hist.items() if k != "policy"}, indent=1) + "\n")
    logger.info("final planner loss %.4f expert loss %.4f",
                hist["planner_loss"][-1], hist["expert_loss"][-1])


# ---------------------------------------------------------------------------
# Evaluation


def _scenario(name: str) -> ScenarioSpec:
    for s in default_scenarios():
        if s.kind == name:
            return s
    raise ConfigFailure(f"unknown scenario {name!r}")


@cli.command()
@config_option
@click.option("--policy", "policy_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--skill", type=click.Choice(SKILLS), default="pick", show_default=True)
@click.option("--scenario", default="seen", show_default=True)
@click.option("--rollouts", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-planner", is_flag=True, help="Use the ablation branch.")
def rollout(policy_path: Path, skill: str, scenario: str, rollouts: int,
            seed: int, no_planner: bool) -> None:
    """Run closed-loop episodes and print their scores."""
    agent = PolicyAgent(load_policy(policy_path), use_planner=not no_planner)
    spec = _scenario(scenario)
    for i in range(rollouts):
        task, kwargs = evaluation.scenario_setup(spec, seed + i, skill)
        score = evaluation.run_rollout(agent, task, seed + i, kwargs)
        click.echo(f"{skill},{scenario},{agent.method},{seed + i},{score:.17g}")


@cli.command("eval")
@config_option
@click.option("--policy", "policy_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--rollouts", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--skills", default=",".join(SKILLS), show_default=True)
@click.option("--scenarios", default="seen,position-shift,visual-distractor,language-variant",
              show_default=True)
@click.option("--baselines/--no-baselines", default=True, show_default=True,
              help="Also score scripted and random agents.")
@click.option("--workers", type=int, default=1, show_default=True,
              help="Reserved; rollouts run serially for bit-reproducibility.")
def eval_cmd(policy_path: Path, out_dir: Path, rollouts: int, seed: int,
             skills: str, scenarios: str, baselines: bool, workers: int) -> None:
    """Full evaluation grid: tasks x scenarios x methods."""
    policy = load_policy(policy_path)
    skill_list = [s.strip() for s in skills.split(",") if s.strip()]
    for s in skill_list:
        if s not in SKILLS:
            raise ConfigFailure(f"unknown skill {s!r}")
    scenario_list = [_scenario(s.strip()) for s in scenarios.split(",") if s.strip()]
    agents: dict[str, object] = {
        "full": PolicyAgent(policy, use_planner=True),
        "no-planner": PolicyAgent(policy, use_planner=False),
    }
    if baselines:
        agents["scripted"] = ScriptedAgent()
        agents["random"] = RandomAgent()
    report = evaluate(agents, skill_list, scenario_list, n_rollouts=rollouts,
                      base_seed=derive_seed(seed, "eval"))
    files = emit_report(report, out_dir)
    _echo_config(out_dir, "eval",
                 {"policy": policy_path, "rollouts": rollouts, "seed": seed,
                  "skills": skill_list, "scenarios": [s.kind for s in scenario_list],
                  "baselines": baselines, "workers": workers})
    for t, s, m in report.groups():
        logger.info("%s/%s/%s: mean %.3f", t, s, m, report.mean_score(t, s, m))
    logger.info("wrote %s", ", ".join(str(f) for f in files))


@cli.command("scale-study")
@config_option
@click.option("--data", "data_root", type=click.Path(exists=True, path_type=Path),
              required=True, envvar="LATACT_DATA_ROOT")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--fractions", default="0.1,0.5,1.0", show_default=True)
@click.option("--rollouts", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=6, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--max-steps", type=int, default=120, show_default=True)
def scale_study(data_root: Path, out_dir: Path, fractions: str, rollouts: int,
                seed: int, epochs: int, batch_size: int, max_steps: int) -> None:
    """Train per dataset fraction, fit the power-law scaling curve."""
    manifests = store.list_manifests(data_root)
    if not manifests:
        raise ConfigFailure(f"no episodes found under {data_root}")
    fr = tuple(float(x) for x in fractions.split(","))
    if any(not 0 < x <= 1 for x in fr):
        raise ConfigFailure("fractions must be in (0, 1]")
    cfg = PipelineConfig(budget=_budget(epochs, batch_size, max_steps))
    fit, reports = run_scaling_study(
        manifests, pipeline.make_trainer(cfg), list(SKILLS), fractions=fr,
        n_rollouts=rollouts, base_seed=derive_seed(seed, "eval"), seed=seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged = evaluation.EvalReport(
        records=[r for _, rep in sorted(reports.items()) for r in rep.records])
    emit_report(merged, out_dir, scaling=fit)
    (out_dir / "scaling.json").write_text(json.dumps({
        "points": fit.points, "coefficient": fit.coefficient,
        "exponent": fit.exponent, "pearson_r": fit.pearson_r,
        "failures": fit.failures}, indent=1, sort_keys=True) + "\n")
    _echo_config(out_dir, "scale-study",
                 {"data": data_root, "fractions": list(fr), "rollouts": rollouts,
                  "seed": seed, "epochs": epochs, "batch_size": batch_size,
                  "max_steps": max_steps})
    logger.info("fit: score = %.4f * N^%.4f (r=%.3f)", fit.coefficient,
                fit.exponent, fit.pearson_r)


@cli.command("ablate-quality")
@config_option
@click.option("--verified", "verified_root", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--unverified", "unverified_root", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--rollouts", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=6, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--max-steps", type=int, default=120, show_default=True)
def ablate_quality(verified_root: Path, unverified_root: Path, out_dir: Path,
                   rollouts: int, seed: int, epochs: int, batch_size: int,
                   max_steps: int) -> None:
    """Verified-clean vs defect-injected training comparison."""
    v = store.list_manifests(verified_root)
    u = store.list_manifests(unverified_root)
    cfg = PipelineConfig(budget=_budget(epochs, batch_size, max_steps))
    result = quality_ablation(v, u, pipeline.make_trainer(cfg), list(SKILLS),
                              n_rollouts=rollouts,
                              base_seed=derive_seed(seed, "eval"), seed=seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rep in (("verified", result.report_verified),
                      ("unverified", result.report_unverified)):
        emit_report(rep, out_dir / name)
    (out_dir / "ablation.json").write_text(json.dumps({
        "score_verified": result.score_verified,
        "score_unverified": result.score_unverified,
        "delta": result.delta}, indent=1, sort_keys=True) + "\n")
    _echo_config(out_dir, "ablate-quality",
                 {"verified": verified_root, "unverified": unverified_root,
                  "rollouts": rollouts, "seed": seed, "epochs": epochs,
                  "batch_size": batch_size, "max_steps": max_steps})
    logger.info("delta = %.4f (verified %.4f, unverified %.4f)",
                result.delta, result.score_verified, result.score_unverified)


@cli.command()
@config_option
@click.option("--report", "report_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="scores.csv produced by eval.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
def plot(report_path: Path, out_dir: Path) -> None:
    """Re-render plots from a stored score table."""
    report = parse_report_csv(report_path)
    files = emit_report(report, out_dir)
    _echo_config(out_dir, "plot", {"report": report_path})
    logger.info("wrote %s", ", ".join(str(f) for f in files))


@cli.command()
@config_option
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--episodes", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=6, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--max-steps", type=int, default=120, show_default=True)
@click.option("--rollouts", type=int, default=10, show_default=True)
def run(out_dir: Path, episodes: int, seed: int, epochs: int, batch_size: int,
        max_steps: int, rollouts: int) -> None:
    """Full pipeline from one config: gen-data, train, evaluate."""
    out_dir = Path(out_dir)
    data_root = out_dir / "data"
    pipeline.generate_dataset(data_root, episodes, seed, overwrite=True)
    eps = _load_dataset(data_root)
    cfg = PipelineConfig(budget=_budget(epochs, batch_size, max_steps))
    policy, history = train_full_pipeline(eps, seed, cfg, out_dir=out_dir / "train")
    agents = {"full": PolicyAgent(policy, use_planner=True),
              "no-planner": PolicyAgent(policy, use_planner=False)}
    report = evaluate(agents, list(SKILLS), default_scenarios(),
                      n_rollouts=rollouts, base_seed=derive_seed(seed, "eval"))
    emit_report(report, out_dir / "eval")
    (out_dir / "train" / "history.json").write_text(
        json.dumps(history, indent=1) + "\n")
    _echo_config(out_dir, "run",
                 {"episodes": episodes, "seed": seed, "epochs": epochs,
                  "batch_size": batch_size, "max_steps": max_steps,
                  "rollouts": rollouts})
    logger.info("done; results under %s", out_dir)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ConfigFailure as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # runtime failure
        logger.exception("runtime failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
