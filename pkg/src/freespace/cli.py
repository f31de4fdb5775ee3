"""Command-line surface: synth, build-data, train, sample, eval, render.

Configuration comes from a JSON file (--config) holding one section per
verb plus a shared "model" section; unknown keys anywhere are rejected.
Every verb honors a global --seed and writes outputs atomically, so two
runs with identical config and seed produce byte-identical trees.

Exit codes: 0 success, 1 validation error (flags or config), 2 runtime
failure (missing or corrupt inputs, infeasible scenes, training errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import persist, synthworld, train, viz
from .diffusion import (GUIDANCE_LAMBDA, SamplerConfig, cosine_schedule,
                        make_noise_template)
from .freespace_gen import (COMMANDS, Contour, DatasetConfig, DrivingLog,
                            build_dataset, command_index)
from .geom import ImageMask
from .metrics import EvalCase, _draw_seed, evaluate, model_sampler
from .nn import DenoiserConfig
from .persist import ShardRecord
from .synthworld import (CH_ROAD, DEFAULT_CAMERA, InfeasibleCommand,
                         InfeasibleScene, SceneSpec, emit_log, generate_world,
                         plan_trajectory)

logger = logging.getLogger(__name__)

CONFIG_SECTIONS = ("model", "synth", "build", "train", "sample", "eval", "render")


class ConfigError(ValueError):
    """Invalid flags or configuration; maps to exit code 1."""


def _check_keys(data: Mapping, allowed: Sequence[str], where: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    _check_keys(raw, CONFIG_SECTIONS, "config")
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
    return raw


def _section(config: Mapping, name: str, allowed: Sequence[str]) -> dict:
    section = dict(config.get(name, {}))
    _check_keys(section, allowed, f"section {name!r}")
    return section


def _build(cls, data: Mapping, where: str):
    """Construct a config dataclass, surfacing its own validation errors."""
    _check_keys(data, [f.name for f in fields(cls)], where)
    try:
        return cls(**data)
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from err


def model_config(config: Mapping) -> DenoiserConfig:
    section = dict(config.get("model", {}))
    if isinstance(section.get("encoder_channels"), list):
        section["encoder_channels"] = tuple(section["encoder_channels"])
    return _build(DenoiserConfig, section, "section 'model'")


def _resolve_seed(args: argparse.Namespace, section: Mapping) -> int:
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def parse_guidance(text: str) -> tuple[str, float]:
    if text == "off":
        return "off", GUIDANCE_LAMBDA
    mode, sep, strength = text.partition(":")
    if mode == "obstacle":
        try:
            lam = float(strength) if sep else GUIDANCE_LAMBDA
        except ValueError as err:
            raise ConfigError(f"bad guidance strength {strength!r}") from err
        if lam <= 0:
            raise ConfigError("guidance strength must be positive")
        return "obstacle", lam
    raise ConfigError(f"unknown guidance mode {text!r}, expected off|obstacle:lambda")


def parse_command_flag(text: str) -> Optional[int]:
    """none -> unconditioned (-1), a command name -> its id, all -> None."""
    if text == "none":
        return -1
    if text == "all":
        return None
    try:
        return command_index(text)
    except (KeyError, ValueError) as err:
        names = ", ".join(COMMANDS)
        raise ConfigError(f"unknown command {text!r}, expected one of "
                          f"{names}, all, none") from err


# ---------------------------------------------------------------------------
# data plumbing shared by train / sample / eval / render


def _load_run(data_dir: Path) -> tuple[list[ShardRecord], dict, list[DrivingLog]]:
    records, manifest = persist.read_dataset(data_dir)
    logs = []
    for entry in manifest.get("log_dirs", []):
        log_path = Path(entry)
        if not log_path.is_absolute():
            log_path = data_dir / log_path
        logs.append(persist.read_log(log_path))
    return records, manifest, logs


def _data_dir(section: Mapping, name: str) -> Path:
    if "data" not in section:
        raise ConfigError(f"section {name!r} needs a 'data' path")
    return Path(section["data"])


def _frame_image(log: DrivingLog, frame_index: int) -> np.ndarray:
    image = log.frames[frame_index].image
    if image is None:
        raise ValueError(f"frame {frame_index} has no image payload")
    return image


def _float_image(channels: np.ndarray) -> np.ndarray:
    return channels.transpose(1, 2, 0).astype(np.float64)


def _template_or_none(args: argparse.Namespace, section: Mapping,
                      records: Sequence[ShardRecord], command: Optional[int],
                      model: DenoiserConfig, seed: int) -> Optional[np.ndarray]:
    if args.template != "on":
        return None
    pool = [r for r in records if command is None or command < 0
            or r.command_id == command]
    k = section.get("template_k", min(32, len(pool)))
    if not isinstance(k, int) or k < 1:
        raise ConfigError("template_k must be a positive integer")
    contours = [Contour(r.points) for r in pool]
    return make_noise_template(contours, np.random.default_rng(seed), k=k,
                               schedule=cosine_schedule(model.t_max))


def _base_sampler_config(args: argparse.Namespace) -> SamplerConfig:
    mode, strength = parse_guidance(args.guidance)
    return SamplerConfig(guidance=mode, guidance_strength=strength)


def _check_model_section(config: Mapping, from_checkpoint: DenoiserConfig) -> None:
    if "model" in config and model_config(config) != from_checkpoint:
        raise ConfigError("config 'model' section disagrees with the checkpoint")


# ---------------------------------------------------------------------------
# synth / build-data


EPISODE_KEYS = ("topology", "count", "lane_count", "lane_width",
                "obstacle_count", "command")


def _episode_specs(section: Mapping) -> list[dict]:
    episodes = section.get("episodes", [])
    if not isinstance(episodes, list):
        raise ConfigError("synth 'episodes' must be a list")
    expanded = []
    for i, item in enumerate(episodes):
        if not isinstance(item, dict):
            raise ConfigError(f"synth episode {i} must be an object")
        _check_keys(item, EPISODE_KEYS, f"synth episode {i}")
        if "topology" not in item:
            raise ConfigError(f"synth episode {i} needs a topology")
        count = item.get("count", 1)
        if not isinstance(count, int) or count < 0:
            raise ConfigError(f"synth episode {i}: count must be >= 0")
        expanded.extend([dict(item)] * count)
    return expanded


def _dataset_config(section: Mapping, where: str) -> DatasetConfig:
    return _build(DatasetConfig, section.get("dataset", {}), f"{where}.dataset")


def _write_run_dataset(logs: Sequence[DrivingLog], dataset_cfg: DatasetConfig,
                       out: Path, log_dirs: Sequence[str],
                       extra: dict) -> dict:
    result = build_dataset(list(logs), dataset_cfg)
    sample_counts: dict[str, int] = {}
    for sample in result.samples:
        topology = logs[sample.log_index].metadata.get("topology", "unknown")
        sample_counts[topology] = sample_counts.get(topology, 0) + 1
    extra = dict(extra, log_dirs=list(log_dirs), sample_counts=sample_counts)
    manifest = persist.write_dataset(result.samples, result.skip_counts,
                                     out, extra=extra)
    logger.info("dataset: %d samples, skipped %s", manifest["samples"],
                manifest["skip_counts"] or "none")
    return manifest


def cmd_synth(args: argparse.Namespace, config: Mapping) -> int:
    section = _section(config, "synth", ("episodes", "frames", "dataset", "seed"))
    seed = _resolve_seed(args, section)
    frames = section.get("frames", 40)
    if not isinstance(frames, int) or frames < 1:
        raise ConfigError("synth 'frames' must be a positive integer")
    dataset_cfg = _dataset_config(section, "synth")
    specs = _episode_specs(section)
    out = Path(args.out)

    episodes, log_dirs, logs = [], [], []
    failures = 0
    for i, item in enumerate(specs):
        derived = np.random.SeedSequence((seed, i)).generate_state(3, np.uint64)
        spec_args = {k: v for k, v in item.items() if k not in ("count", "command")}
        try:
            spec = SceneSpec(seed=int(derived[0]), **spec_args)
        except ValueError as err:
            raise ConfigError(f"synth episode {i}: {err}") from err
        try:
            world = generate_world(spec)
            command = item.get("command")
            if command is None:
                choices = synthworld.feasible_commands(world)
                pick = np.random.default_rng(int(derived[1])).integers(len(choices))
                command = choices[int(pick)]
            trajectory = plan_trajectory(world, command, seed=int(derived[2]))
            log = emit_log(world, trajectory[:frames], DEFAULT_CAMERA, spec, command)
        except (InfeasibleScene, InfeasibleCommand) as err:
            logger.error("episode %d (%s): %s", i, item["topology"], err)
            episodes.append({"topology": item["topology"], "error": str(err)})
            failures += 1
            continue
        name = f"logs/episode-{i:05d}"
        persist.write_log(log, out / name)
        episodes.append({"topology": item["topology"], "command": command,
                         "frames": len(log.frames), "log": name})
        log_dirs.append(name)
        logs.append(log)

    if specs and failures == len(specs):
        raise RuntimeError(f"all {failures} episodes were infeasible")

    episode_counts: dict[str, int] = {}
    for entry in episodes:
        if "error" not in entry:
            key = entry["topology"]
            episode_counts[key] = episode_counts.get(key, 0) + 1
    _write_run_dataset(logs, dataset_cfg, out, log_dirs,
                       {"episodes": episodes, "episode_counts": episode_counts,
                        "failures": failures})
    return 0


def cmd_build_data(args: argparse.Namespace, config: Mapping) -> int:
    section = _section(config, "build", ("logs", "dataset"))
    if "logs" not in section:
        raise ConfigError("section 'build' needs a 'logs' path")
    logs_root = Path(section["logs"])
    if not logs_root.is_dir():
        raise RuntimeError(f"log directory not found: {logs_root}")
    if (logs_root / "index.json").exists():
        log_paths = [logs_root]
    else:
        log_paths = sorted(p for p in logs_root.iterdir()
                           if (p / "index.json").exists())
    if not log_paths:
        raise RuntimeError(f"no logs under {logs_root}")
    logs = [persist.read_log(p) for p in log_paths]
    _write_run_dataset(logs, _dataset_config(section, "build"), Path(args.out),
                       [str(p.resolve()) for p in log_paths], {})
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace, config: Mapping) -> int:
    allowed = ("data", "checkpoint_every", "seed",
               "learning_rate", "batch_size", "steps", "command_dropout")
    section = _section(config, "train", allowed)
    seed = _resolve_seed(args, section)
    every = section.get("checkpoint_every", 0)
    if not isinstance(every, int) or every < 0:
        raise ConfigError("train 'checkpoint_every' must be a non-negative integer")
    tc_fields = {k: section[k] for k in
                 ("learning_rate", "batch_size", "steps", "command_dropout")
                 if k in section}
    tc = _build(train.TrainConfig, dict(tc_fields, seed=seed), "section 'train'")

    records, _, logs = _load_run(_data_dir(section, "train"))
    data = train.assemble(records, logs)

    if args.checkpoint is not None:
        ck = persist.load_checkpoint(args.checkpoint)
        _check_model_section(config, ck.config)
        model = ck.config
        state = train.RunState.from_checkpoint(ck)
        logger.info("resumed at step %d from %s", state.step, args.checkpoint)
    else:
        model = model_config(config)
        state = train.RunState.fresh(model, tc)
    if data.contours.shape[1] != model.n_points:
        raise ConfigError(f"dataset has {data.contours.shape[1]} contour points, "
                          f"model expects {model.n_points}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    losses: list[tuple[int, float]] = []

    def checkpoint(path: Path) -> None:
        persist.save_checkpoint(path, model, state.params, state.adam,
                                state.rng, state.step, meta=state.order_meta())

    def on_step(step: int, loss: float) -> None:
        losses.append((step, loss))
        if every and step % every == 0 and step < tc.steps:
            checkpoint(out / f"checkpoint-{step:06d}.fsck")

    train.train_steps(state, data, model, tc, on_step=on_step)
    checkpoint(out / "checkpoint-final.fsck")
    lines = "".join(f"{step} {loss:.17g}\n" for step, loss in losses)
    persist._atomic_bytes(out / "loss.txt", lines.encode())
    return 0


# ---------------------------------------------------------------------------
# sample / eval / render


def _load_model(args: argparse.Namespace, config: Mapping):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    ck = persist.load_checkpoint(args.checkpoint)
    _check_model_section(config, ck.config)
    return ck.params, ck.config, cosine_schedule(ck.config.t_max)


def _limit(section: Mapping, n: int) -> int:
    limit = section.get("limit", n)
    if not isinstance(limit, int) or limit < 1:
        raise ConfigError("'limit' must be a positive integer")
    return min(limit, n)


def _draw_configs(base: SamplerConfig, args: argparse.Namespace,
                  command: Optional[int], case_index: int, seed: int,
                  obstacles: tuple) -> list[SamplerConfig]:
    """Per-draw configs: fixed command, or one draw per command for 'all'."""
    commands = list(range(len(COMMANDS))) if command is None \
        else [command] * args.samples
    return [replace(base, command=cmd, obstacles=obstacles,
                    seed=_draw_seed(seed, case_index, draw))
            for draw, cmd in enumerate(commands)]


def cmd_sample(args: argparse.Namespace, config: Mapping) -> int:
    section = _section(config, "sample", ("data", "limit", "template_k", "seed"))
    seed = _resolve_seed(args, section)
    params, model, schedule = _load_model(args, config)
    records, _, logs = _load_run(_data_dir(section, "sample"))
    command = parse_command_flag(args.command)
    template = _template_or_none(args, section, records, command, model, seed)
    base = replace(_base_sampler_config(args),
                   init="template" if template is not None else "gaussian",
                   template=template)
    run = model_sampler(params, model, schedule)

    keys: list[tuple[int, int]] = []
    for r in records:
        if (r.log_index, r.frame_index) not in keys:
            keys.append((r.log_index, r.frame_index))
    keys = keys[:_limit(section, len(keys))]
    if not keys:
        raise RuntimeError("no frames to sample")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for idx, (log_index, frame_index) in enumerate(keys):
        frame = logs[log_index].frames[frame_index]
        image = _frame_image(logs[log_index], frame_index)
        configs = _draw_configs(base, args, command, idx, seed,
                                tuple(frame.obstacles))
        contours = run(_float_image(image), configs)
        record = {"log": log_index, "frame": frame_index,
                  "commands": [c.command for c in configs],
                  "contours": [c.points.tolist() for c in contours]}
        persist._atomic_bytes(out / f"sample-{idx:05d}.json",
                              persist._json_bytes(record))
        viz.save_png(out / f"sample-{idx:05d}.png", viz.overlay(image, contours))
        logger.info("sampled frame %d/%d", idx + 1, len(keys))
    return 0


def _eval_cases(records: Sequence[ShardRecord],
                logs: Sequence[DrivingLog]) -> list[EvalCase]:
    cases = []
    for r in records:
        log = logs[r.log_index]
        image = _frame_image(log, r.frame_index)
        road = ImageMask(image.shape[2], image.shape[1], image[CH_ROAD] > 0)
        cases.append(EvalCase(image=_float_image(image), gt_mask=r.mask,
                              topology=log.metadata.get("topology", "unknown"),
                              obstacles=tuple(log.frames[r.frame_index].obstacles),
                              road_mask=road, command=r.command_id))
    return cases


def cmd_eval(args: argparse.Namespace, config: Mapping) -> int:
    section = _section(config, "eval", ("data", "limit", "template_k", "seed"))
    seed = _resolve_seed(args, section)
    params, model, schedule = _load_model(args, config)
    records, _, logs = _load_run(_data_dir(section, "eval"))
    if not records:
        raise RuntimeError("dataset holds no evaluation cases")
    records = records[:_limit(section, len(records))]
    command = parse_command_flag(args.command)
    template = _template_or_none(args, section, records, command, model, seed)
    base = replace(_base_sampler_config(args),
                   init="template" if template is not None else "gaussian",
                   template=template)

    if command is None:
        def config_for(case: EvalCase, draw: int) -> SamplerConfig:
            return replace(base, command=draw % len(COMMANDS),
                           obstacles=case.obstacles or ())
    else:
        def config_for(case: EvalCase, draw: int) -> SamplerConfig:
            return replace(base, command=command,
                           obstacles=case.obstacles or ())

    report = evaluate(model_sampler(params, model, schedule),
                      _eval_cases(records, logs), config=config_for,
                      draws=args.samples, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    persist._atomic_bytes(out / "report.json", report.to_json().encode())
    persist._atomic_bytes(out / "report.txt", (report.to_text() + "\n").encode())
    print(report.to_text())
    return 0


def cmd_render(args: argparse.Namespace, config: Mapping) -> int:
    section = _section(config, "render", ("data", "limit", "template_k", "seed"))
    seed = _resolve_seed(args, section)
    params, model, schedule = _load_model(args, config)
    records, _, logs = _load_run(_data_dir(section, "render"))
    if not records:
        raise RuntimeError("dataset holds no frames to render")
    records = records[:_limit(section, len(records))]
    command = parse_command_flag(args.command)
    template = _template_or_none(args, section, records, command, model, seed)
    base = replace(_base_sampler_config(args),
                   init="template" if template is not None else "gaussian",
                   template=template)
    run = model_sampler(params, model, schedule)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for idx, r in enumerate(records):
        frame = logs[r.log_index].frames[r.frame_index]
        image = _frame_image(logs[r.log_index], r.frame_index)
        configs = _draw_configs(base, args, command, idx, seed,
                                tuple(frame.obstacles))
        contours = run(_float_image(image), configs)
        rgb = viz.overlay(image, contours, ground_truth=Contour(r.points))
        viz.save_png(out / f"render-{idx:05d}.png", rgb)
    logger.info("rendered %d frames", len(records))
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    # validation problems exit 1, not argparse's default 2
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="freespace",
                     description="Free-space contour diffusion toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)
    verbs: dict[str, Callable] = {
        "synth": cmd_synth, "build-data": cmd_build_data, "train": cmd_train,
        "sample": cmd_sample, "eval": cmd_eval, "render": cmd_render}
    for name, handler in verbs.items():
        p = sub.add_parser(name)
        p.set_defaults(handler=handler)
        p.add_argument("--config", default=None, metavar="PATH")
        p.add_argument("--seed", type=int, default=None, metavar="U64")
        p.add_argument("--out", required=True, metavar="DIR")
        p.add_argument("--checkpoint", default=None, metavar="PATH")
        p.add_argument("--samples", type=int, default=6, metavar="N")
        p.add_argument("--guidance", default="off", metavar="off|obstacle:LAMBDA")
        p.add_argument("--command", default="none", metavar="NAME|all|none")
        p.add_argument("--template", choices=("off", "on"), default="off")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.samples < 1:
            raise ConfigError("--samples must be a positive integer")
        config = load_config(args.config)
        return args.handler(args, config)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # the CLI boundary turns failures into exit codes
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
