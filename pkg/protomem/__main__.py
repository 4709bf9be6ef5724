"""
MIT License

Copyright (c) 2024-present protomem contributors

Permission is hereby granted, free of charge, to any person obtaining a copy
of this software and associated documentation files (the "Software"), to deal
in the Software without restriction, including without limitation the rights
to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
copies of the Software, and to permit persons to whom the Software is
furnished to do so, subject to the following conditions:

The above copyright notice and this permission notice shall be included in all
copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
SOFTWARE.
"""
import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (bench_attention, memory_usage_profile, run_ablation_grid, run_oracle_suite, summarize_ablation,
                       verify_lipschitz_bound, write_bench_csv, write_profile_csv, write_summary_csv)
from .checkpoint import checkpoint_summary, load_checkpoint, save_checkpoint
from .config import RunConfig, add_arguments, load_config, overrides_from_args, parse_value, write_config
from .errors import (CheckpointError, ConfigError, ContractError, NonFiniteError, ProtoMemError, TrainingAborted,
                     VerificationError)
from .stats import MetricsWriter
from .trainkit import evaluate, train
from .utils import format_time

_log = logging.getLogger('protomem')

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

CHECKPOINT_NAME = 'checkpoint.pmac'


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError as error:
        raise ConfigError(f'Expected a comma-separated list of integers, got {text!r}') from error


def _echo(cfg: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / 'config.cfg')
    return out


def _prepare(args: argparse.Namespace) -> RunConfig:
    """ Loads the effective configuration and echoes it into the output directory. """
    cfg = load_config(args.config, overrides_from_args(args))
    _echo(cfg, Path(args.out))
    return cfg


def _resumed_config(saved: RunConfig, requested: RunConfig, flags: Dict[str, Any]) -> RunConfig:
    """ The checkpoint fixes every key but the total step count. Flags that contradict it are rejected. """
    conflicts = sorted(key for key in flags if key != 'steps' and getattr(saved, key) != getattr(requested, key))

    if conflicts:
        raise ConfigError(f'Cannot change {", ".join(conflicts)} when resuming from a checkpoint')

    return saved.replace(steps=requested.steps)


def _write_json(path: Path, payload: Any):
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + '\n', encoding='utf-8')


def cmd_train(args: argparse.Namespace) -> int:
    flags = overrides_from_args(args)
    cfg = load_config(args.config, flags)
    state = None
    steps = cfg.steps

    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = _resumed_config(state.config, cfg, flags)
        steps = max(0, cfg.steps - state.step)
        _log.info('Resuming from step %d, %d steps left', state.step, steps)

    out = _echo(cfg, Path(args.out))

    writer = MetricsWriter(out / 'metrics.jsonl')
    result = train(cfg, cfg.dataset(), steps, hooks=[writer], state=state)
    save_checkpoint(result.state, out / CHECKPOINT_NAME)

    last = result.log[-1] if result.log else None
    print(f'trained {len(result.log)} steps, {result.state.refresh_count} prototype refreshes')

    if last is not None:
        print(f'final loss {last["loss"]:.6f}, token accuracy {last["token_acc"]:.4f}')

    print(f'checkpoint: {out / CHECKPOINT_NAME}')
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    beam = _prepare(args).beam
    out = Path(args.out)
    state = load_checkpoint(args.checkpoint)
    dataset = state.config.dataset()
    splits = ['train', 'val', 'test'] if args.split == 'all' else [args.split]
    records = {}

    for split in splits:
        metrics = evaluate(state.model, dataset.split(split), split, beam=beam)
        records[split] = metrics.to_dict()
        score = 'n/a' if metrics.mem_attn_score is None else f'{metrics.mem_attn_score:.4f}'
        print(f'{split}: samples={metrics.samples} token_acc={metrics.token_acc:.4f} '
              f'exact_match={metrics.exact_match:.4f} mem_attn_score={score}')

    _write_json(out / 'eval.json', records)

    if args.profile:
        try:
            points = memory_usage_profile(state.model, dataset.split(splits[-1]))
        except ContractError:
            print('memory profile skipped: no memory installed')
        else:
            write_profile_csv(points, out / 'memory_profile.csv')
            print(f'memory profile: {len(points)} positions')

    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = _prepare(args)
    out = Path(args.out)
    reports = [verify_lipschitz_bound(trials=cfg.trials, eps_max=cfg.eps_max, seed=cfg.seed, scaled=scaled)
               for scaled in (False, True)]
    checks = run_oracle_suite(cfg.seed, fault_injection=args.fault_injection, value_instances=args.value_instances,
                              bank_histories=args.bank_histories, identity_configs=args.identity_configs)

    for report in reports:
        mode = 'scaled' if report.scaled else 'unscaled'
        verdict = 'PASS' if report.passed else 'FAIL'
        print(f'bound ({mode}): trials={report.trials} max_ratio={report.max_ratio:.9f} max_ratio ≤ 1: {verdict}')

    for check in checks:
        print(f'oracle {check.name}: {"PASS" if check.passed else "FAIL"} ({check.detail})')

    _write_json(out / 'verify.json', {'bounds': [report.to_dict() for report in reports],
                                      'oracles': [check._asdict() for check in checks]})

    failures = [report.violating_trial for report in reports if not report.passed]
    failures += [check.record for check in checks if not check.passed]

    if failures:
        raise VerificationError(f'{len(failures)} verification checks failed', failures[0])

    return EXIT_OK


def _parse_axis(text: str) -> Dict[str, List[Any]]:
    if '=' not in text:
        raise ConfigError(f'Expected --axis key=value1,value2, got {text!r}')

    key, values = text.split('=', 1)
    key = key.strip().replace('-', '_')
    return {key: [parse_value(key, value) for value in values.split(',') if value.strip()]}


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _prepare(args)
    out = Path(args.out)
    axes: Dict[str, List[Any]] = {}

    for axis in args.axis or ['mode=pma,baseline,learnable-mem']:
        axes.update(_parse_axis(axis))

    report = run_ablation_grid(cfg, axes, _int_list(args.seeds))
    summary = summarize_ablation(report)
    report.to_json(out / 'ablation.json')
    report.to_csv(out / 'ablation.csv')
    write_summary_csv(summary, out / 'ablation_summary.csv')

    for entry in summary:
        print(f'{entry["cell"]:<40} {entry["split"]:<5} exact_match {entry["exact_match_mean"]:.4f} ± '
              f'{entry["exact_match_std"]:.4f} token_acc {entry["token_acc_mean"]:.4f} ± {entry["token_acc_std"]:.4f}')

    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _prepare(args)
    rows = bench_attention(_int_list(args.t_k), _int_list(args.bench_m), cfg.d_model, cfg.heads, args.repeats, cfg.seed)
    write_bench_csv(rows, Path(args.out) / 'bench.csv')

    for row in rows:
        print(f'T_k={row.t_k:<5} m={row.m:<5} median={row.median_us:.1f}us p95={row.p95_us:.1f}us')

    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    summary = checkpoint_summary(args.checkpoint)

    if summary['digest'] != 'ok':
        print(f'{summary["path"]}: {summary["error"]}')
        return EXIT_FAILED

    print(f'checkpoint: {summary["path"]} (digest ok, step {summary["step"]})')
    print(f'parameters: {summary["parameters"]} (closed form {summary["parameters_closed_form"]})')
    print('config:')

    for key, value in sorted(summary['config'].items()):
        print(f'  {key} = {value}')

    if not summary['prototypes']:
        print('prototypes: absent')

    for proto in summary['prototypes']:
        norm = proto['key_norm']
        print(f'prototypes layer {proto["layer"]} head {proto["head"]}: m={proto["m"]} built_at_step={proto["built_at_step"]} '
              f'k={proto["k_used"]} key_norm min={norm["min"]:.4f} mean={norm["mean"]:.4f} max={norm["max"]:.4f}')

    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='A key = value configuration file.')
    common.add_argument('--out', default='out', help='The directory every output is written to.')
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    add_arguments(common)

    parser = argparse.ArgumentParser(prog='protomem', description='Prototype memory attention toolkit.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True)

    train_parser = commands.add_parser('train', parents=[common], help='Train a model.')
    train_parser.add_argument('--resume', default=None, help='A checkpoint to continue from.')
    train_parser.set_defaults(handler=cmd_train)

    eval_parser = commands.add_parser('eval', parents=[common], help='Evaluate a checkpoint.')
    eval_parser.add_argument('--checkpoint', required=True)
    eval_parser.add_argument('--split', default='val', choices=['train', 'val', 'test', 'all'])
    eval_parser.add_argument('--profile', action='store_true', help='Also write the memory usage profile.')
    eval_parser.set_defaults(handler=cmd_eval)

    verify_parser = commands.add_parser('verify', parents=[common], help='Run the bound check and oracle suite.')
    verify_parser.add_argument('--fault-injection', action='store_true', help='Perturb value prototype weights.')
    verify_parser.add_argument('--value-instances', type=int, default=200)
    verify_parser.add_argument('--bank-histories', type=int, default=1000)
    verify_parser.add_argument('--identity-configs', type=int, default=20)
    verify_parser.set_defaults(handler=cmd_verify)

    ablate_parser = commands.add_parser('ablate', parents=[common], help='Run an ablation grid.')
    ablate_parser.add_argument('--axis', action='append', help='key=value1,value2 (repeatable).')
    ablate_parser.add_argument('--seeds', default='0,1,2')
    ablate_parser.set_defaults(handler=cmd_ablate)

    bench_parser = commands.add_parser('bench', parents=[common], help='Time attention with and without memory.')
    bench_parser.add_argument('--t-k', default='16,64,256')
    bench_parser.add_argument('--bench-m', default='0,16,64')
    bench_parser.add_argument('--repeats', type=int, default=5)
    bench_parser.set_defaults(handler=cmd_bench)

    inspect_parser = commands.add_parser('inspect', help='Describe a checkpoint.')
    inspect_parser.add_argument('checkpoint')
    inspect_parser.add_argument('--log-level', default='WARNING', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    inspect_parser.set_defaults(handler=cmd_inspect, out=None)

    return parser


def _run(handler: Callable[[argparse.Namespace], int], args: argparse.Namespace) -> int:
    try:
        return handler(args)
    except ConfigError as error:
        _log.error('Configuration error: %s', error)
        return EXIT_CONFIG
    except TrainingAborted as error:
        _log.error('%s', error)
        print(json.dumps(error.snapshot, sort_keys=True, default=str))
        return EXIT_NUMERIC
    except NonFiniteError as error:
        _log.error('Numeric failure: %s', error)
        return EXIT_NUMERIC
    except VerificationError as error:
        _log.error('%s', error)
        print(json.dumps(error.record, sort_keys=True, default=str))
        return EXIT_FAILED
    except CheckpointError as error:
        _log.error('Checkpoint error: %s', error)
        return EXIT_FAILED
    except ProtoMemError as error:
        _log.error('%s: %s', type(error).__name__, error)
        return EXIT_FAILED


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    started = datetime.now(timezone.utc)
    clock = time.perf_counter()
    code = _run(args.handler, args)

    if args.out is not None and Path(args.out).is_dir():
        elapsed = time.perf_counter() - clock
        _write_json(Path(args.out) / 'run_meta.json', {
            'command': args.command, 'exit_code': code, 'started': started.isoformat(),
            'finished': datetime.now(timezone.utc).isoformat(), 'elapsed': format_time(elapsed),
            'elapsed_seconds': elapsed, 'numpy': np.__version__, 'protomem': __version__
        })

    return code


if __name__ == '__main__':
    sys.exit(main())
