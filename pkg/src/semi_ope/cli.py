"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 support violation,
4 I/O error.
"""
from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import __version__
from . import annotation as ann
from . import estimators as est
from . import io as sio
from .environments import (
    ENVIRONMENTS,
    eps_greedy,
    generate_datasets,
    make_environment,
    make_policy_set,
    optimal_policy,
    perturb_policy,
)
from .errors import ConfigError, SemiOPEError, SupportViolation
from .experiments import rows_to_csv, run_experiment
from .mdp import Policy, TabularMDP, exact_policy_value, horizon_q_values
from .rng import stream

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_CONFIG = 2
EXIT_SUPPORT = 3
EXIT_IO = 4


class Ctx:
    def __init__(self, seed: int, seed_given: bool, jobs: int, out_dir: Path):
        self.seed = seed
        self.seed_given = seed_given
        self.jobs = jobs
        self.out_dir = out_dir


# --------------------------------------------------------------------------
# helpers


def _load_mapping(path) -> dict:
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML: {e}", str(p)) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", str(p)) from None


def _env_params(env: str, env_config: Optional[str], env_params: tuple) -> dict:
    params: dict = {}
    if env_config:
        doc = _load_mapping(env_config)
        params = {"config": doc} if env == "sepsis" else doc
    for item in env_params:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}", "--env-param")
        k, v = item.split("=", 1)
        try:
            params[k] = json.loads(v)
        except json.JSONDecodeError:
            params[k] = v
    return params


def resolve_policy(spec: str, mdp: Optional[TabularMDP], seed: int, what: str) -> Policy:
    """Policy from a JSON file or a symbolic name: ``optimal``, ``uniform``,
    ``eps-greedy[:EPS]``, ``flipK-J`` (policy-set member), or a comma list of
    action probabilities applied at every state."""
    if os.path.isfile(spec):
        return sio.policy_from_dict(sio.read_json(spec))
    if "," in spec:
        try:
            row = [float(x) for x in spec.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse policy {spec!r}", what) from None
        if mdp is None:
            raise ConfigError("a probability row needs the MDP to know the state count", what)
        return Policy(np.tile(row, (mdp.num_states, 1)), name=spec)
    if mdp is None:
        raise ConfigError(f"policy {spec!r} is neither a file nor a probability row, and no MDP is available", what)
    if spec == "uniform":
        return Policy.uniform(mdp.num_states, mdp.num_actions)
    if spec == "optimal":
        return optimal_policy(mdp)
    if spec.startswith("eps-greedy"):
        eps = float(spec.split(":", 1)[1]) if ":" in spec else 0.1
        return eps_greedy(optimal_policy(mdp), eps)
    if spec.startswith("flip") and "-" in spec:
        try:
            k, j = (int(x) for x in spec[4:].split("-", 1))
        except ValueError:
            raise ConfigError(f"cannot parse policy {spec!r}", what) from None
        cand = np.flatnonzero(~mdp.terminal_mask())
        pol = perturb_policy(optimal_policy(mdp), k, stream(seed, "perturb", k, j), cand)
        return Policy(pol.probs, name=spec)
    raise ConfigError(f"unknown policy {spec!r}", what)


def _require_files(paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")


def _find_mdp(explicit: Optional[str], near: Path) -> Optional[TabularMDP]:
    path = Path(explicit) if explicit else near.parent / "mdp.json"
    if explicit and not path.is_file():
        raise FileNotFoundError(str(path))
    return sio.mdp_from_dict(sio.read_json(path)) if path.is_file() else None


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int, mdp: Optional[TabularMDP],
                    outputs: list, t0: float) -> Path:
    files = [{"path": p.name, "sha256": sio.file_sha256(p)} for p in outputs]
    doc = {
        "format_version": sio.FORMAT_VERSION,
        "kind": "run_manifest",
        "tool_version": __version__,
        "command": command,
        "config": config,
        "master_seed": seed,
        "environment_fingerprint": None if mdp is None else sio.mdp_fingerprint(mdp),
        "outputs": files,
        "timings": {"wall_seconds": round(time.time() - t0, 3)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x).__name__)


# --------------------------------------------------------------------------
# commands


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--seed", type=int, default=None, help="Master seed (default 0).")
@click.option("--jobs", type=int, default=1, envvar="SEMI_OPE_JOBS", show_default=True,
              help="Worker processes; never changes output bytes.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
@click.version_option(__version__)
@click.pass_context
def cli(ctx, seed, jobs, out_dir):
    """Semi-offline policy evaluation with counterfactual annotations."""
    if jobs < 1:
        raise click.BadParameter("must be >= 1", param_hint="--jobs")
    ctx.obj = Ctx(0 if seed is None else seed, seed is not None, jobs, Path(out_dir))


@cli.command("gen-data")
@click.option("--env", "env", type=click.Choice(ENVIRONMENTS), required=True)
@click.option("--env-config", type=click.Path(dir_okay=False), help="JSON/TOML environment parameters.")
@click.option("--env-param", "env_params", multiple=True, help="key=value (JSON value), repeatable.")
@click.option("--datasets", type=int, default=1, show_default=True)
@click.option("--episodes", type=int, default=1000, show_default=True)
@click.option("--behavior", default="eps-greedy:0.1", show_default=True, help="Behavior policy spec or JSON file.")
@click.pass_obj
def gen_data(obj: Ctx, env, env_config, env_params, datasets, episodes, behavior):
    """Sample trajectory datasets from an environment."""
    t0 = time.time()
    if datasets < 1 or episodes < 1:
        raise ConfigError("must be positive", "--datasets/--episodes")
    mdp = make_environment(env, _env_params(env, env_config, env_params))
    pb = resolve_policy(behavior, mdp, obj.seed, "--behavior")
    obj.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    p = obj.out_dir / "mdp.json"
    sio.write_json(sio.mdp_to_dict(mdp), p)
    outputs.append(p)
    p = obj.out_dir / "behavior_policy.json"
    sio.write_json(sio.policy_to_dict(pb), p)
    outputs.append(p)
    for i, batch in enumerate(generate_datasets(mdp, pb, datasets, episodes, obj.seed, obj.jobs)):
        p = obj.out_dir / f"dataset_{i:03d}.jsonl"
        sio.write_trajectories(p, batch)
        outputs.append(p)
    cfg = {"env": env, "env_params": _env_params(env, env_config, env_params), "datasets": datasets,
           "episodes": episodes, "behavior": behavior}
    _write_manifest(obj.out_dir, "gen-data", cfg, obj.seed, mdp, outputs, t0)
    click.echo(f"wrote {datasets} dataset(s) to {obj.out_dir}")


def _availability(value: str):
    if value == "all":
        return "all"
    try:
        parts = [float(x) for x in value.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse availability {value!r}", "--availability") from None
    return parts[0] if len(parts) == 1 else parts


def _noise(value: str):
    if value == "reward":
        return "reward"
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"cannot parse noise {value!r}", "--noise") from None


@cli.command("annotate")
@click.argument("data_files", nargs=-1, required=True, type=click.Path())
@click.option("--mdp", "mdp_path", type=click.Path(), help="MDP JSON (default: mdp.json beside the data).")
@click.option("--source", type=click.Choice(["q-eval", "q-behavior", "reward-mean"]), default="q-eval", show_default=True)
@click.option("--noise", default="0.0", show_default=True, help="Annotation noise std, or 'reward'.")
@click.option("--availability", default="all", show_default=True, help="'all', a fraction, or per-action fractions.")
@click.option("--eval-policy", help="Evaluation policy (needed for q-eval and --bias-correct).")
@click.option("--behavior-policy", help="Behavior policy (default: behavior_policy.json beside the data).")
@click.option("--impute", is_flag=True, help="Fill missing annotations with per-(s,a) means.")
@click.option("--bias-correct", is_flag=True, help="Shift annotations by an approximate-model Q difference.")
@click.pass_obj
def annotate_cmd(obj: Ctx, data_files, mdp_path, source, noise, availability, eval_policy, behavior_policy,
                 impute, bias_correct):
    """Add simulated counterfactual annotations to trajectory files."""
    t0 = time.time()
    _require_files(data_files)
    first = Path(data_files[0])
    mdp = _find_mdp(mdp_path, first)
    if mdp is None:
        raise ConfigError("no MDP found; pass --mdp", "--mdp")
    src = source.replace("-", "_")
    if (src == "q_eval" or bias_correct) and not eval_policy:
        raise ConfigError("this annotation source or --bias-correct needs --eval-policy", "--eval-policy")
    pb_spec = behavior_policy or str(first.parent / "behavior_policy.json")
    pb = resolve_policy(pb_spec, mdp, obj.seed, "--behavior-policy") if (
        src == "q_behavior" or bias_correct or behavior_policy or Path(pb_spec).is_file()) else None
    pe = resolve_policy(eval_policy, mdp, obj.seed, "--eval-policy") if eval_policy else None
    spec = ann.AnnotationSpec(src, _noise(noise), _availability(availability), 0)
    obj.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for k, f in enumerate(data_files):
        batch, _ = sio.read_trajectories(f, mdp.num_actions, mdp.horizon)
        file_spec = ann.AnnotationSpec(spec.source, spec.noise_std, spec.availability,
                                       int(stream(obj.seed, "annotate.avail", k).integers(2**62)))
        ad = ann.annotate(batch, mdp, file_spec, stream(obj.seed, "annotate.noise", k), pe, pb)
        if bias_correct:
            mhat = ann.fit_approximate_mdp(batch, mdp.num_states, mdp.num_actions, mdp.horizon)
            ad = ann.correct_bias(ad, mhat, pb, pe)
        if impute:
            ad = ann.impute_missing(ad, mdp.num_states)
        out = obj.out_dir / (Path(f).name.removesuffix(".jsonl") + ".annotated.jsonl")
        if out.resolve() == Path(f).resolve():
            raise ConfigError("output would overwrite the input", str(out))
        sio.write_trajectories(out, batch, ad)
        outputs.append(out)
    cfg = {"inputs": [str(f) for f in data_files], "source": src, "noise": noise, "availability": availability,
           "eval_policy": eval_policy, "behavior_policy": pb_spec if pb is not None else None,
           "impute": impute, "bias_correct": bias_correct}
    _write_manifest(obj.out_dir, "annotate", cfg, obj.seed, mdp, outputs, t0)
    click.echo(f"annotated {len(outputs)} file(s) into {obj.out_dir}")


EVAL_ESTIMATORS = tuple(e.replace("_", "-") for e in est.ESTIMATOR_IDS)


def _weights(value: str, seed: int):
    if value.startswith("random-uniform"):
        parts = value.split(":")
        center = float(parts[1]) if len(parts) > 1 else 0.5
        width = float(parts[2]) if len(parts) > 2 else 0.0
        return ann.RandomUniform(center, width, int(stream(seed, "evaluate.weights").integers(2**62)))
    return ann.parse_scheme(value.replace("-", "_"))


def evaluate_dataset(estimator: str, batch, ad, pi_e: Policy, pi_b: Policy, weights, discount: float,
                     num_states: int):
    eid = estimator.replace("-", "_")
    needs_ann = eid.startswith("c") or eid.startswith("naive")
    if needs_ann and ad is None:
        raise ConfigError(f"estimator {estimator} needs an annotated dataset", "--estimator")
    if eid == "is":
        return est.is_estimate(batch, pi_e, pi_b)
    if eid == "wis":
        return est.wis_estimate(batch, pi_e, pi_b)
    if eid == "pdis":
        return est.pdis_estimate(batch, pi_e, pi_b, discount)
    if eid == "pdwis":
        return est.pdwis_estimate(batch, pi_e, pi_b, discount)
    if eid in ("cis", "cwis", "cpdis", "cpdwis"):
        wd = ann.assign_weights(ad, weights)
        pbp = ann.augmented_policy(ann.average_weights(wd, num_states), pi_b)
        if eid in ("cis", "cwis"):
            rep = est.cis_estimate(wd, pi_e, pbp)
            return est.weighted_variant(rep) if eid == "cwis" else rep
        rep = est.cpdis_estimate(wd, pi_e, pbp, discount)
        return est.weighted_variant(rep) if eid == "cpdwis" else rep
    if eid == "cstar_is":
        return est.cstar_is_estimate(ad, pi_e)
    if eid == "cstar_pdis":
        return est.cstar_pdis_estimate(ad, pi_e, discount)
    if eid == "naive_unweighted":
        return est.naive_unweighted_estimate(ad, pi_e, pi_b, discount=discount)
    if eid == "naive_weighted":
        return est.naive_weighted_estimate(ad, pi_e, pi_b, discount=discount)
    raise ConfigError(f"unknown estimator {estimator!r}", "--estimator")


@cli.command("evaluate")
@click.argument("data_file", type=click.Path())
@click.option("--estimator", type=click.Choice(EVAL_ESTIMATORS), required=True)
@click.option("--eval-policy", required=True)
@click.option("--behavior-policy", help="Default: behavior_policy.json beside the data.")
@click.option("--mdp", "mdp_path", type=click.Path(), help="MDP JSON (default: mdp.json beside the data, if any).")
@click.option("--weights", default="equal-split", show_default=True,
              help="equal-split, factual-only or random-uniform:CENTER:WIDTH.")
@click.option("--discount", type=float, default=1.0, show_default=True)
@click.option("--per-trajectory/--summary", default=True, show_default=True)
@click.option("--output", type=click.Path(dir_okay=False), help="Also write the report to this file.")
@click.pass_obj
def evaluate_cmd(obj: Ctx, data_file, estimator, eval_policy, behavior_policy, mdp_path, weights, discount,
                 per_trajectory, output):
    """Estimate the value of an evaluation policy and print a JSON report."""
    _require_files([data_file])
    path = Path(data_file)
    mdp = _find_mdp(mdp_path, path)
    pe = resolve_policy(eval_policy, mdp, obj.seed, "--eval-policy")
    pb = resolve_policy(behavior_policy or str(path.parent / "behavior_policy.json"), mdp, obj.seed,
                        "--behavior-policy")
    if pe.probs.shape != pb.probs.shape:
        raise ConfigError("evaluation and behavior policies have different shapes", "--eval-policy")
    horizon = mdp.horizon if mdp is not None else None
    batch, ad = sio.read_trajectories(path, pb.num_actions, horizon)
    rep = evaluate_dataset(estimator, batch, ad, pe, pb, _weights(weights, obj.seed), discount, pb.num_states)
    text = json.dumps(rep.to_dict(include_per_trajectory=per_trajectory), sort_keys=True, default=_jsonable)
    click.echo(text)
    if output:
        Path(output).write_text(text + "\n")


@cli.command("experiment")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
def experiment_cmd(obj: Ctx, config_path):
    """Run a table/heatmap/suite experiment and write CSVs plus a manifest."""
    t0 = time.time()
    config = _load_mapping(config_path)
    if obj.seed_given or "seed" not in config:
        config["seed"] = obj.seed
    tables = run_experiment(config, obj.jobs)
    obj.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, rows in tables.items():
        p = obj.out_dir / f"{name}.csv"
        p.write_text(rows_to_csv(rows))
        outputs.append(p)
    mdp = None
    env = config.get("environment")
    if env is not None:
        name = env if isinstance(env, str) else env.get("name")
        params = {} if isinstance(env, str) else {k: v for k, v in env.items() if k != "name"}
        mdp = make_environment(name, params)
    _write_manifest(obj.out_dir, "experiment", config, int(config["seed"]), mdp, outputs, t0)
    for p in outputs:
        click.echo(str(p))


@cli.command("env-info")
@click.option("--env", "env", type=click.Choice(ENVIRONMENTS), required=True)
@click.option("--env-config", type=click.Path(dir_okay=False))
@click.option("--env-param", "env_params", multiple=True)
@click.option("--policy", "policies", multiple=True, help="Policy spec to report, repeatable.")
@click.option("--q-tables", is_flag=True, help="Include horizon-indexed Q-tables of the reported policies.")
@click.option("--policy-set", is_flag=True, help="Include the perturbed evaluation-policy set.")
@click.option("--epsilon", type=float, default=0.1, show_default=True, help="Behavior epsilon.")
@click.pass_obj
def env_info(obj: Ctx, env, env_config, env_params, policies, q_tables, policy_set, epsilon):
    """Print exact policy values, Q-tables and policy sets as JSON."""
    mdp = make_environment(env, _env_params(env, env_config, env_params))
    opt = optimal_policy(mdp)
    pb = eps_greedy(opt, epsilon)
    named = {"optimal": opt, "behavior": pb}
    for spec in policies:
        named[spec] = resolve_policy(spec, mdp, obj.seed, "--policy")
    doc = {
        "environment": env, "num_states": mdp.num_states, "num_actions": mdp.num_actions,
        "horizon": mdp.horizon, "fingerprint": sio.mdp_fingerprint(mdp),
        "values": {k: exact_policy_value(mdp, p) for k, p in named.items()},
    }
    if q_tables:
        doc["q_tables"] = {k: horizon_q_values(mdp, p).values for k, p in named.items()}
    if policy_set:
        ps = make_policy_set(mdp, opt, master_seed=obj.seed)
        doc["policy_set"] = [{"label": lab, "value": exact_policy_value(mdp, p)} for lab, p in zip(ps.labels, ps)]
    click.echo(json.dumps(doc, sort_keys=True, default=_jsonable))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="semi-ope", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    except SupportViolation as e:
        click.echo(f"support violation: {e}", err=True)
        return EXIT_SUPPORT
    except (OSError, json.JSONDecodeError) as e:
        click.echo(f"I/O error: {e}", err=True)
        return EXIT_IO
    except (SemiOPEError, ValueError) as e:
        click.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
