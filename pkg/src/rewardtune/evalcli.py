"""Evaluation reports, ablation grids, the collapse experiment, and the CLI.

Every table-producing operation emits two renderings of the same numbers: a
machine-readable CSV and an aligned plain-text table. Both are byte-identical
across repeated runs with the same config and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensorad as ta
from .data import (DEFAULT_SPLIT_SEED, load_prompts, make_prompt_sets,
                   make_world, world_from_state, world_state)
from .finetune import TrainConfig, run_training
from .inference import (DEFAULT_LAMBDA_SWEEP, continuity_probe, mix_styles,
                        sample_from_cond, write_sample)
from .models import (DenoiserParams, ImageEncoderParams, TextEncoderParams,
                     init_denoiser, init_image_encoder, init_text_encoder,
                     load_checkpoint, save_checkpoint, state_digest,
                     text_encode)
from .pretrain import (DENOISER_STAGES, PretrainConfig, clip_pretrain,
                       diffusion_pretrain)
from .rewards import RewardSpec, reward_values
from .schedule import SAMPLER_STEPS, SCHEDULE_KINDS, make_schedule, make_step_plan
from .tensorad import Tensor
from .util import derive_seed

MIN_EVAL_PROMPTS = 32

# metric readouts reported for every model; weights are irrelevant here
# because reward_values returns the unweighted values
_EVAL_SPEC = RewardSpec(entries=(
    ("image-style", 1.0), ("alignment", 1.0), ("clip-constraint", 1.0),
))

# CSV column names for the reward readouts, in reporting order
REWARD_COLUMNS = (
    ("image-style", "reward_image"),
    ("alignment", "reward_align"),
    ("clip-constraint", "reward_clip"),
)


# ---------------------------------------------------------------------------
# tables: one set of numbers, two renderings


def _fmt_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


@dataclass(frozen=True)
class Table:
    """Column header plus rows of plain values, rendered on demand."""

    header: tuple
    rows: tuple

    def to_csv(self):
        lines = [",".join(self.header)]
        for row in self.rows:
            lines.append(",".join(_fmt_cell(v) for v in row))
        return "\n".join(lines) + "\n"

    def render_text(self):
        cells = [list(self.header)] + [
            [_fmt_cell(v) for v in row] for row in self.rows
        ]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.header))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
        return "\n".join(lines) + "\n"

    def write(self, directory, stem):
        """Write ``<stem>.csv`` and ``<stem>.txt``; returns both paths."""
        os.makedirs(directory, exist_ok=True)
        csv_path = os.path.join(directory, f"{stem}.csv")
        txt_path = os.path.join(directory, f"{stem}.txt")
        _write_text(csv_path, self.to_csv())
        _write_text(txt_path, self.render_text())
        return csv_path, txt_path


def _write_text(path, content):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(content)
    return path


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ModelEval:
    """Metrics for one model: reward means, diversity, spread."""

    name: str
    reward_means: dict
    diversity: float
    spread: float

    def __post_init__(self):
        values = [self.diversity, self.spread, *self.reward_means.values()]
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"non-finite metric for model {self.name!r}")


@dataclass(frozen=True)
class EvalReport:
    """Per-model metrics over a holdout prompt set.

    diversity: mean pairwise Euclidean distance among samples from distinct
    prompts (one sample per prompt, first seed). spread: mean pairwise
    distance among samples of the same prompt across seeds, averaged over
    prompts.
    """

    entries: tuple
    n_prompts: int
    n_seeds: int

    def __post_init__(self):
        if self.n_prompts < MIN_EVAL_PROMPTS:
            raise ValueError(
                f"report needs at least {MIN_EVAL_PROMPTS} prompts, got {self.n_prompts}"
            )
        if self.n_seeds < 2:
            raise ValueError("report needs at least 2 seeds")

    def table(self):
        header = ("model",) + tuple(col for _, col in REWARD_COLUMNS) + (
            "diversity", "spread")
        rows = []
        for e in self.entries:
            rows.append((e.name,) + tuple(e.reward_means[k] for k, _ in REWARD_COLUMNS)
                        + (e.diversity, e.spread))
        return Table(header=header, rows=tuple(rows))

    def to_csv(self):
        return self.table().to_csv()

    def render_text(self):
        return self.table().render_text()

    def __getitem__(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def _mean_pairwise_distance(samples):
    """Mean Euclidean distance over all unordered pairs, in float64."""
    n = len(samples)
    if n < 2:
        return 0.0
    arr = np.stack(samples).astype(np.float64)
    total = 0.0
    for i in range(n - 1):
        total += float(np.linalg.norm(arr[i + 1:] - arr[i], axis=1).sum())
    return total / (n * (n - 1) / 2)


def _named_states(checkpoints):
    """Normalize the accepted checkpoint forms to [(name, state), ...]."""
    if isinstance(checkpoints, dict):
        if checkpoints and all(isinstance(v, np.ndarray) for v in checkpoints.values()):
            return [("model", checkpoints)]  # a bare merged state
        return list(checkpoints.items())
    return [(str(name), state) for name, state in checkpoints]


def _eval_one_model(name, state, prompts, plan, w, seeds, sampler, sched):
    text = TextEncoderParams.from_state(state)
    image = ImageEncoderParams.from_state(state)
    denoiser = DenoiserParams.from_state(state)
    world = world_from_state(state)

    with ta.pause_recording():
        conds = [text_encode(text, p) for p in prompts]

    # samples[j][i]: prompt i under seed j; one shared noise draw per seed so
    # diversity across prompts reflects conditioning, not the initial latent
    samples = []
    for s in seeds:
        samples.append([
            sample_from_cond(cond, denoiser, plan, w, s, sampler=sampler, sched=sched)
            for cond in conds
        ])

    sums = {kind: 0.0 for kind, _ in REWARD_COLUMNS}
    for panel in samples:
        for x, prompt in zip(panel, prompts):
            vals = reward_values(Tensor(x), prompt, _EVAL_SPEC, world=world,
                                 image_params=image, text_params=text)
            for kind in sums:
                sums[kind] += vals[kind]
    count = len(seeds) * len(prompts)
    means = {kind: total / count for kind, total in sums.items()}

    diversity = _mean_pairwise_distance(samples[0])
    per_prompt = [
        _mean_pairwise_distance([samples[j][i] for j in range(len(seeds))])
        for i in range(len(prompts))
    ]
    spread = float(np.mean(per_prompt))
    return ModelEval(name=name, reward_means=means, diversity=diversity, spread=spread)


def evaluate(checkpoints, prompt_set, plan, w, seeds, *, sampler="ddim",
             sched=None, out_dir=None):
    """Score one or more checkpoints on a prompt set; returns an EvalReport.

    ``checkpoints`` is a merged state dict, a mapping name -> state, or a
    sequence of (name, state) pairs. Each model is scored against the world
    stored in its own checkpoint. ``seeds`` needs at least two distinct
    entries so per-prompt spread is measurable. When ``out_dir`` is given the
    report is written as report.csv and report.txt.
    """
    prompts = list(prompt_set)
    if not prompts:
        raise ValueError("empty prompt set")
    if len(prompts) < MIN_EVAL_PROMPTS:
        raise ValueError(
            f"evaluation needs at least {MIN_EVAL_PROMPTS} prompts, got {len(prompts)}"
        )
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) < 2:
        raise ValueError("evaluation needs at least 2 distinct seeds")
    if sampler not in SAMPLER_STEPS:
        raise ValueError(f"unknown sampler {sampler!r}")
    if sched is None:
        sched = make_schedule("linear-beta", plan.t_train)

    named = _named_states(checkpoints)
    if not named:
        raise ValueError("no checkpoints given")
    entries = tuple(
        _eval_one_model(name, state, prompts, plan, w, seeds, sampler, sched)
        for name, state in named
    )
    report = EvalReport(entries=entries, n_prompts=len(prompts), n_seeds=len(seeds))
    if out_dir:
        report.table().write(out_dir, "report")
    return report


def _holdout_prompts(config, world):
    _, holdout = make_prompt_sets(
        world, config.n_train_prompts, config.n_holdout_prompts, seed=DEFAULT_SPLIT_SEED
    )
    return holdout


# ---------------------------------------------------------------------------
# ablation grids


def _cell_seeds(base_seed, *labels):
    """Two derived seeds per grid cell, reproducible in isolation."""
    return (derive_seed(base_seed, *labels), derive_seed(base_seed, *labels, 1))


def _run_cells(cells, fn):
    """Evaluate independent grid cells in a worker pool; order by sorting."""
    if not cells:
        return []
    workers = min(len(cells), os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = dict(zip(cells, pool.map(fn, cells)))
    return [results[c] for c in sorted(cells)]


def ablate_steps(base_config, state_in, train_ks, test_ns, *, w=1.0, out_dir=None):
    """Train once per K (gradient steps), evaluate each at every test step
    count N; returns the grid as a Table sorted by (train_k, test_n).

    Every K must satisfy 1 <= K <= base_config.n_steps (the chain length used
    during fine-tuning). When ``out_dir`` is given writes ablate_steps.csv/.txt.
    """
    ks = sorted({int(k) for k in train_ks})
    ns = sorted({int(n) for n in test_ns})
    if not ks or not ns:
        raise ValueError("train_ks and test_ns must be non-empty")
    for k in ks:
        if not (1 <= k <= base_config.n_steps):
            raise ValueError(
                f"train K={k} outside [1, {base_config.n_steps}] for N={base_config.n_steps}"
            )

    world = world_from_state(state_in)
    holdout = _holdout_prompts(base_config, world)
    sched = make_schedule(base_config.schedule_kind, base_config.t_train)

    trained = {}
    for k in ks:
        cfg = dataclasses.replace(base_config, k_last=k)
        trained[k], _ = run_training(cfg, state_in)

    def eval_cell(cell):
        k, n = cell
        plan = make_step_plan(n, base_config.t_train)
        report = evaluate(
            trained[k], holdout, plan, w, _cell_seeds(base_config.seed, k, n),
            sampler=base_config.sampler, sched=sched,
        )
        e = report.entries[0]
        return (k, n) + tuple(e.reward_means[kind] for kind, _ in REWARD_COLUMNS)

    rows = _run_cells([(k, n) for k in ks for n in ns], eval_cell)
    table = Table(
        header=("train_k", "test_n") + tuple(col for _, col in REWARD_COLUMNS),
        rows=tuple(rows),
    )
    if out_dir:
        table.write(out_dir, "ablate_steps")
    return table


def ablate_schedulers(base_config, state_in, kinds, steps, *, w=1.0, out_dir=None):
    """Fine-tune once, then evaluate under each (sampler, steps) pair.

    ``kinds`` must be a subset of the known samplers; duplicates are dropped.
    Returns a Table sorted by (sampler, steps); when ``out_dir`` is given
    writes ablate_schedulers.csv/.txt.
    """
    seen = []
    for kind in kinds:
        if kind not in SAMPLER_STEPS:
            raise ValueError(f"unknown scheduler kind {kind!r}")
        if kind not in seen:
            seen.append(kind)
    ns = sorted({int(n) for n in steps})
    if not seen or not ns:
        raise ValueError("kinds and steps must be non-empty")

    world = world_from_state(state_in)
    holdout = _holdout_prompts(base_config, world)
    sched = make_schedule(base_config.schedule_kind, base_config.t_train)
    state_ft, _ = run_training(base_config, state_in)

    def eval_cell(cell):
        kind, n = cell
        plan = make_step_plan(n, base_config.t_train)
        report = evaluate(
            state_ft, holdout, plan, w, _cell_seeds(base_config.seed, kind, n),
            sampler=kind, sched=sched,
        )
        e = report.entries[0]
        return (kind, n) + tuple(e.reward_means[k] for k, _ in REWARD_COLUMNS)

    rows = _run_cells([(kind, n) for kind in seen for n in ns], eval_cell)
    table = Table(
        header=("sampler", "steps") + tuple(col for _, col in REWARD_COLUMNS),
        rows=tuple(rows),
    )
    if out_dir:
        table.write(out_dir, "ablate_schedulers")
    return table


# ---------------------------------------------------------------------------
# collapse experiment


@dataclass(frozen=True)
class CollapseResult:
    """Paired-run outcome: diversity with and without the similarity anchor."""

    gamma_clip: float
    baseline: ModelEval
    collapsed: ModelEval
    constrained: ModelEval
    collapsed_state: dict
    constrained_state: dict

    @property
    def collapsed_fraction(self):
        return self.collapsed.diversity / self.baseline.diversity

    @property
    def constrained_fraction(self):
        return self.constrained.diversity / self.baseline.diversity

    def table(self):
        rows = (
            ("baseline", self.baseline.diversity, 1.0),
            ("gamma_clip=0", self.collapsed.diversity, self.collapsed_fraction),
            (f"gamma_clip={self.gamma_clip:g}", self.constrained.diversity,
             self.constrained_fraction),
        )
        return Table(header=("run", "diversity", "fraction_of_baseline"), rows=rows)


def collapse_experiment(config, state_in, *, gamma_clip=100.0, w=1.0, out_dir=None):
    """Train the collapse probe with and without the similarity constraint.

    Both runs share ``config`` except for the reward weights: the probe alone
    (gamma_clip = 0) versus the probe plus the image-text similarity term at
    ``gamma_clip``. Reports holdout diversity for the untouched baseline and
    both trained models; when ``out_dir`` is given writes collapse.csv/.txt
    plus the two trained checkpoints.
    """
    if gamma_clip <= 0:
        raise ValueError("gamma_clip must be positive for the constrained run")
    probe = RewardSpec(entries=(("degenerate-collapse-probe", 1.0),))
    anchored = RewardSpec(entries=(
        ("degenerate-collapse-probe", 1.0), ("clip-constraint", float(gamma_clip)),
    ))

    world = world_from_state(state_in)
    holdout = _holdout_prompts(config, world)
    plan = make_step_plan(config.n_steps, config.t_train)
    sched = make_schedule(config.schedule_kind, config.t_train)
    seeds = _cell_seeds(config.seed, "collapse-eval")

    collapsed_state, _ = run_training(dataclasses.replace(config, rewards=probe), state_in)
    constrained_state, _ = run_training(dataclasses.replace(config, rewards=anchored), state_in)

    def score(name, state):
        report = evaluate(state, holdout, plan, w, seeds,
                          sampler=config.sampler, sched=sched)
        return dataclasses.replace(report.entries[0], name=name)

    result = CollapseResult(
        gamma_clip=float(gamma_clip),
        baseline=score("baseline", state_in),
        collapsed=score("collapsed", collapsed_state),
        constrained=score("constrained", constrained_state),
        collapsed_state=collapsed_state,
        constrained_state=constrained_state,
    )
    if out_dir:
        result.table().write(out_dir, "collapse")
        save_checkpoint(collapsed_state, os.path.join(out_dir, "collapsed.rcpt"))
        save_checkpoint(constrained_state, os.path.join(out_dir, "constrained.rcpt"))
    return result


# ---------------------------------------------------------------------------
# command-line interface


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_ints(text, flag):
    try:
        values = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ValueError(f"{flag} expects integers, got {text!r}") from None
    if not values:
        raise ValueError(f"{flag} is empty")
    return values


def _parse_floats(text, flag):
    try:
        values = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ValueError(f"{flag} expects numbers, got {text!r}") from None
    if not values:
        raise ValueError(f"{flag} is empty")
    return values


def _parse_prompt(text, world):
    tokens = tuple(_parse_ints(text, "--prompt"))
    for tok in tokens:
        if tok not in world.token_ids:
            valid = " ".join(str(t) for t in world.token_ids)
            raise ValueError(
                f"prompt token {tok} is not a world attribute (valid: {valid})")
    return tokens


def _load_json_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config file must hold a JSON object")
    return raw


def _reject_config(args):
    if args.config is not None:
        raise ValueError(f"the {args.command} command takes no --config")


def _cli_seed(args):
    return 0 if args.seed is None else args.seed


def _train_config(args, **overrides):
    cfg = TrainConfig.from_dict(_load_json_config(args.config))
    if args.seed is not None:
        overrides["seed"] = args.seed
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _pretrain_config(args, **overrides):
    raw = _load_json_config(args.config)
    if not raw:
        return None
    cfg = PretrainConfig.from_dict(raw)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _encoders_from(state):
    return (TextEncoderParams.from_state(state), ImageEncoderParams.from_state(state),
            DenoiserParams.from_state(state), world_from_state(state))


def _sample_meta(prompt, args, extra=None):
    meta = {
        "prompt": list(prompt),
        "seed": _cli_seed(args),
        "guidance_scale": float(args.w),
        "sampler": args.sampler,
        "steps": int(args.steps),
        "schedule": args.schedule,
    }
    if extra:
        meta.update(extra)
    return meta


def _announce(path):
    print(f"wrote {path}")


def _cmd_pretrain_clip(args):
    seed = _cli_seed(args)
    cfg = _pretrain_config(args)
    if cfg is None:
        cfg = PretrainConfig(seed=derive_seed(seed, "clip"))
    elif args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=derive_seed(seed, "clip"))
    world = make_world(derive_seed(seed, "world"))
    text = init_text_encoder(derive_seed(seed, "init-text"))
    image = init_image_encoder(derive_seed(seed, "init-image"))
    _, _, info = clip_pretrain(text, image, world, cfg)

    os.makedirs(args.out_dir, exist_ok=True)
    rows = tuple(
        (it, loss, temp)
        for it, (loss, temp) in enumerate(zip(info["losses"], info["temperatures"]))
    )
    Table(header=("iter", "loss", "temperature"), rows=rows).write(
        args.out_dir, "clip_metrics")
    state = {**text.state(), **image.state(), **world_state(world)}
    path = os.path.join(args.out_dir, "clip.rcpt")
    save_checkpoint(state, path)
    _announce(path)
    print(f"digest {state_digest(state)}")


def _cmd_pretrain_diffusion(args):
    seed = _cli_seed(args)
    state = load_checkpoint(args.checkpoint)
    text = TextEncoderParams.from_state(state)
    image = ImageEncoderParams.from_state(state)
    world = world_from_state(state)
    denoiser = init_denoiser(derive_seed(seed, "init-denoiser"))
    sched = make_schedule(args.schedule, args.t_train)

    single = _pretrain_config(args)
    if single is not None:
        stages = [dataclasses.replace(single, seed=derive_seed(seed, "diffusion", 0))
                  if args.seed is not None else single]
    else:
        stages = [
            PretrainConfig(seed=derive_seed(seed, "diffusion", i),
                           iterations=n, batch_size=32, lr=lr)
            for i, (n, lr) in enumerate(DENOISER_STAGES)
        ]
    losses = []
    for cfg in stages:
        _, info = diffusion_pretrain(denoiser, text, world, sched, cfg)
        losses.extend(info["losses"])

    os.makedirs(args.out_dir, exist_ok=True)
    rows = tuple((it, loss) for it, loss in enumerate(losses))
    Table(header=("iter", "loss"), rows=rows).write(args.out_dir, "diffusion_metrics")
    out_state = {**text.state(), **image.state(), **denoiser.state(), **world_state(world)}
    path = os.path.join(args.out_dir, "model.rcpt")
    save_checkpoint(out_state, path)
    _announce(path)
    print(f"digest {state_digest(out_state)}")


def _run_finetune(args, regime):
    cfg = _train_config(args, regime=regime)
    state_in = load_checkpoint(args.checkpoint)
    state_out, _ = run_training(cfg, state_in, out_dir=args.out_dir)
    _announce(os.path.join(args.out_dir, "model.rcpt"))
    _announce(os.path.join(args.out_dir, "metrics.csv"))
    print(f"digest {state_digest(state_out)}")


def _cmd_finetune_text(args):
    _run_finetune(args, args.regime)


def _cmd_finetune_unet(args):
    _run_finetune(args, "unet-chain")


def _cmd_sample(args):
    _reject_config(args)
    text, image, denoiser, world = _encoders_from(load_checkpoint(args.checkpoint))
    prompt = _parse_prompt(args.prompt, world)
    plan = make_step_plan(args.steps, args.t_train)
    sched = make_schedule(args.schedule, args.t_train)

    with ta.pause_recording():
        cond = text_encode(text, prompt)
    x = sample_from_cond(cond, denoiser, plan, args.w, _cli_seed(args),
                         sampler=args.sampler, sched=sched)
    scores = reward_values(Tensor(x), prompt, _EVAL_SPEC, world=world,
                           image_params=image, text_params=text)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "sample.f32")
    write_sample(path, x, _sample_meta(prompt, args, {"rewards": scores}))
    _announce(path)
    _announce(f"{path}.json")


def _cmd_interpolate(args):
    _reject_config(args)
    state_a = load_checkpoint(args.checkpoint_a)
    state_b = load_checkpoint(args.checkpoint_b)
    text_a = TextEncoderParams.from_state(state_a)
    text_b = TextEncoderParams.from_state(state_b)
    # frozen components come from the first (base) checkpoint
    denoiser = DenoiserParams.from_state(state_a)
    prompt = _parse_prompt(args.prompt, world_from_state(state_a))
    lambdas = _parse_floats(args.lambdas, "--lambdas")
    plan = make_step_plan(args.steps, args.t_train)
    sched = make_schedule(args.schedule, args.t_train)

    samples, distances = continuity_probe(
        text_a, text_b, denoiser, prompt, plan, args.w, _cli_seed(args),
        lambdas=lambdas, sampler=args.sampler, sched=sched,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    for i, (lam, x) in enumerate(zip(lambdas, samples)):
        path = os.path.join(args.out_dir, f"sample_{i:02d}.f32")
        write_sample(path, x, _sample_meta(prompt, args, {"lambda": float(lam)}))
        _announce(path)
    rows = tuple(
        (la, lb, d) for la, lb, d in zip(lambdas, lambdas[1:], distances)
    )
    Table(header=("lambda_from", "lambda_to", "distance"), rows=rows).write(
        args.out_dir, "interpolation")
    _announce(os.path.join(args.out_dir, "interpolation.csv"))


def _cmd_mix(args):
    _reject_config(args)
    paths = [p for p in args.checkpoints.split(",") if p]
    weights = _parse_floats(args.weights, "--weights")
    if len(paths) != len(weights):
        raise ValueError(
            f"got {len(paths)} checkpoints but {len(weights)} weights")
    states = [load_checkpoint(p) for p in paths]
    texts = [TextEncoderParams.from_state(s) for s in states]
    denoiser = DenoiserParams.from_state(states[0])
    prompt = _parse_prompt(args.prompt, world_from_state(states[0]))
    plan = make_step_plan(args.steps, args.t_train)
    sched = make_schedule(args.schedule, args.t_train)

    with ta.pause_recording():
        conds = [text_encode(t, prompt) for t in texts]
        mixed = mix_styles(list(zip(conds, weights)))
    x = sample_from_cond(mixed, denoiser, plan, args.w, _cli_seed(args),
                         sampler=args.sampler, sched=sched)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "mix.f32")
    write_sample(path, x, _sample_meta(prompt, args, {"weights": weights}))
    _announce(path)


def _cmd_evaluate(args):
    _reject_config(args)
    named = []
    for path in args.checkpoint:
        name = os.path.splitext(os.path.basename(path))[0]
        named.append((name, load_checkpoint(path)))
    world = world_from_state(named[0][1])
    if args.prompts:
        prompt_set = load_prompts(args.prompts)
    else:
        _, prompt_set = make_prompt_sets(world, 48, 36, seed=DEFAULT_SPLIT_SEED)
    plan = make_step_plan(args.steps, args.t_train)
    sched = make_schedule(args.schedule, args.t_train)
    if args.seeds:
        seeds = _parse_ints(args.seeds, "--seeds")
    else:
        seeds = list(_cell_seeds(_cli_seed(args), "eval"))

    report = evaluate(named, prompt_set, plan, args.w, seeds,
                      sampler=args.sampler, sched=sched, out_dir=args.out_dir)
    _announce(os.path.join(args.out_dir, "report.csv"))
    print(report.render_text(), end="")


def _cmd_ablate_steps(args):
    cfg = _train_config(args)
    state = load_checkpoint(args.checkpoint)
    table = ablate_steps(
        cfg, state, _parse_ints(args.train_k, "--train-k"),
        _parse_ints(args.test_n, "--test-n"), w=args.w, out_dir=args.out_dir,
    )
    _announce(os.path.join(args.out_dir, "ablate_steps.csv"))
    print(table.render_text(), end="")


def _cmd_ablate_schedulers(args):
    cfg = _train_config(args)
    state = load_checkpoint(args.checkpoint)
    kinds = [k for k in args.kinds.split(",") if k]
    table = ablate_schedulers(
        cfg, state, kinds, _parse_ints(args.steps, "--steps"),
        w=args.w, out_dir=args.out_dir,
    )
    _announce(os.path.join(args.out_dir, "ablate_schedulers.csv"))
    print(table.render_text(), end="")


def _cmd_collapse(args):
    cfg = _train_config(args)
    state = load_checkpoint(args.checkpoint)
    result = collapse_experiment(cfg, state, gamma_clip=args.gamma_clip,
                                 w=args.w, out_dir=args.out_dir)
    _announce(os.path.join(args.out_dir, "collapse.csv"))
    print(result.table().render_text(), end="")


def _add_sampling_flags(p):
    p.add_argument("--steps", type=int, default=25, help="denoising steps")
    p.add_argument("--w", type=float, default=1.0, help="guidance scale")
    p.add_argument("--sampler", choices=sorted(SAMPLER_STEPS), default="ddim")
    p.add_argument("--schedule", choices=sorted(SCHEDULE_KINDS), default="linear-beta")
    p.add_argument("--t-train", type=int, default=1000, help="training timestep count")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None,
                        help="base seed for all randomness (default 0)")
    common.add_argument("--out-dir", required=True, help="output directory")

    parser = _Parser(prog="rewardtune",
                     description="Reward fine-tuning of a toy diffusion model.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=fn, command=name)
        return p

    add("pretrain-clip", _cmd_pretrain_clip,
        "contrastive pretraining of both encoders")

    p = add("pretrain-diffusion", _cmd_pretrain_diffusion,
            "noise-prediction pretraining of the denoiser")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint")
    p.add_argument("--schedule", choices=sorted(SCHEDULE_KINDS), default="linear-beta")
    p.add_argument("--t-train", type=int, default=1000)

    p = add("finetune-text", _cmd_finetune_text,
            "reward fine-tuning of the text encoder")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p.add_argument("--regime", choices=("prompt-chain", "direct"),
                   default="prompt-chain")

    p = add("finetune-unet", _cmd_finetune_unet,
            "reward fine-tuning of the denoiser")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")

    p = add("sample", _cmd_sample, "draw one sample for a prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="token ids, e.g. '3 14 27'")
    _add_sampling_flags(p)

    p = add("interpolate", _cmd_interpolate,
            "sample along an embedding interpolation sweep")
    p.add_argument("--checkpoint-a", required=True, help="original model")
    p.add_argument("--checkpoint-b", required=True, help="fine-tuned model")
    p.add_argument("--prompt", required=True)
    p.add_argument("--lambdas", default=",".join(str(v) for v in DEFAULT_LAMBDA_SWEEP))
    _add_sampling_flags(p)

    p = add("mix", _cmd_mix, "sample from a weighted mix of text encoders")
    p.add_argument("--checkpoints", required=True, help="comma-separated paths")
    p.add_argument("--weights", required=True, help="comma-separated weights")
    p.add_argument("--prompt", required=True)
    _add_sampling_flags(p)

    p = add("evaluate", _cmd_evaluate, "score checkpoints on holdout prompts")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path (repeatable)")
    p.add_argument("--prompts", help="prompt file (default: holdout split)")
    p.add_argument("--seeds", help="comma-separated evaluation seeds")
    _add_sampling_flags(p)

    p = add("ablate-steps", _cmd_ablate_steps,
            "grid over training-K and test-N step counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-k", default="5,10,15")
    p.add_argument("--test-n", default="5,10,15,25")
    p.add_argument("--w", type=float, default=1.0)

    p = add("ablate-schedulers", _cmd_ablate_schedulers,
            "table over samplers and step counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kinds", default="ddim,euler")
    p.add_argument("--steps", default="25,50")
    p.add_argument("--w", type=float, default=1.0)

    p = add("collapse", _cmd_collapse,
            "paired collapse-probe runs with and without the constraint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gamma-clip", type=float, default=100.0)
    p.add_argument("--w", type=float, default=1.0)

    return parser


def cli_main(argv=None):
    """Entry point; returns 0 on success, 1 on usage error, 2 on failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise _UsageError(parser.format_usage()
                              + f"{parser.prog}: error: a command is required")
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help path
        return int(exc.code or 0)
    try:
        args.func(args)
    except Exception as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
