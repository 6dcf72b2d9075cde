"""
The ``samora`` command line.

Every command takes an optional ``--config`` YAML file and ``--set key=value``
overrides (values parsed as YAML).  Stage outputs are cached in the artifact store
(``--cache``, ``$SAMORA_CACHE_DIR`` or ``~/.cache/samora``).
"""

import argparse
import dataclasses
import logging
import shutil
import sys
from pathlib import Path

import pandas as pd
import yaml
from tqdm import tqdm

from samora import LEVELS, SamoraError
from samora.checkpoint import load_experts_into, save_module
from samora.config import ExperimentConfig, load_config, with_overrides, config_hash, save_config
from samora.evaluation import evaluate_volumes
from samora.finetune import Finetuner, write_train_report
from samora.metrics import paired_t_test
from samora.store import ArtifactStore
from samora.util import log_to_stderr

_log = logging.getLogger(__name__)

STATS_COLUMNS = ['metric', 'n', 'mean_diff', 't', 'p', 'ci_low', 'ci_high']


def _parse_set(text):
    if '=' not in text:
        raise argparse.ArgumentTypeError('expected key=value, got {!r}'.format(text))
    key, value = text.split('=', 1)
    return key.strip(), yaml.safe_load(value)


def build_parser():
    "Build the argument parser."
    parser = argparse.ArgumentParser(prog='samora', description=__doc__.strip().splitlines()[0])
    parser.add_argument('-v', '--verbose', action='store_true', help='log debug messages')
    parser.add_argument('-q', '--quiet', action='store_true', help='log only warnings')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', help='experiment configuration (YAML)')
    common.add_argument('--set', dest='overrides', action='append', type=_parse_set,
                        default=[], metavar='KEY=VALUE', help='override a configuration key')
    common.add_argument('--cache', help='artifact cache root')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('make-data', parents=[common], help='generate the synthetic data set')
    p.add_argument('-o', '--out', required=True, help='output directory')
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser('pretrain-teacher', parents=[common],
                       help='build and continually pre-train a teacher')
    p.add_argument('--level', required=True, choices=['image', 'patch'])
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser('pretrain-lora', parents=[common], help='pre-train a stage-1 expert')
    p.add_argument('--level', required=True, choices=[lvl.value for lvl in LEVELS])
    p.add_argument('-o', '--out', help='copy the expert checkpoint here')
    p.set_defaults(func=cmd_pretrain_lora)

    p = sub.add_parser('finetune', parents=[common], help='stage-2 fine-tuning')
    p.add_argument('--adapters', nargs='+', help='stage-1 expert checkpoints to load')
    p.add_argument('--allow-scratch-adapters', action='store_true',
                   help='fine-tune without pre-trained experts')
    p.add_argument('-o', '--out', help='output directory for model/ and train_report.txt')
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser('evaluate', parents=[common], help='evaluate on the test volumes')
    p.add_argument('--model', help='stage-2 checkpoint (default: the cached one)')
    p.add_argument('-o', '--out', help='report directory')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('ablate', parents=[common], help='run an ablation axis')
    p.add_argument('--axis', required=True,
                   choices=['fusion_strategy', 'fusion_order', 'rank', 'pretrain_mode'])
    p.add_argument('--values', nargs='+', help='axis values (default: all)')
    p.add_argument('--seeds', nargs='+', type=int, help='repeat seeds')
    p.add_argument('--levels', nargs='+', help='levels for the pretrain_mode axis')
    p.add_argument('-j', '--jobs', type=int, default=1, help='worker processes')
    p.add_argument('-o', '--out', help='output directory')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('export-heatmap', parents=[common], help='export attention heatmaps')
    p.add_argument('--model', help='stage-2 checkpoint (default: the cached one)')
    p.add_argument('--index', type=int, default=0, help='test slice index')
    p.add_argument('-o', '--out', required=True, help='output directory')
    p.set_defaults(func=cmd_export_heatmap)

    p = sub.add_parser('stats', help='paired t-test between two evaluation reports')
    p.add_argument('report_a', help='first report directory')
    p.add_argument('report_b', help='second report directory')
    p.add_argument('--metric', default='dice', choices=['dice', 'hd'])
    p.add_argument('--confidence', type=float, default=0.95)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser('run', parents=[common], help='run the full pipeline')
    p.add_argument('-o', '--out', help='run output directory')
    p.set_defaults(func=cmd_run)

    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.overrides:
        cfg = with_overrides(cfg, dict(args.overrides))
    return cfg


def _pipeline(args):
    from samora.experiments import Pipeline
    return Pipeline(_config(args), ArtifactStore(args.cache) if args.cache else None)


def cmd_make_data(args):
    from samora.experiments import load_data, save_data
    cfg = _config(args)
    data = load_data(cfg.data)
    save_data(data, args.out)
    print('{} labeled, {} unlabeled slices written to {}'.format(
        len(data.labeled), len(data.unlabeled), args.out))


def cmd_pretrain_teacher(args):
    pipe = _pipeline(args)
    pipe.teacher(args.level)
    stage = 'teacher-' + args.level
    print(pipe.store.path(stage, pipe.keys[stage]))


def cmd_pretrain_lora(args):
    pipe = _pipeline(args)
    path = pipe.expert(args.level)
    if args.out:
        out = Path(args.out)
        if out.exists():
            shutil.rmtree(out)
        shutil.copytree(path, out)
        path = out
    print(path)


def cmd_finetune(args):
    pipe = _pipeline(args)
    cfg = pipe.config
    if args.adapters is None and not args.allow_scratch_adapters:
        src = pipe.finetune()
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            if (out / 'model').exists():
                shutil.rmtree(out / 'model')
            shutil.copytree(src / 'model', out / 'model')
            shutil.copyfile(src / 'train_report.txt', out / 'train_report.txt')
            src = out
        print(src)
        return

    if not args.out:
        raise SamoraError('finetune with --adapters or --allow-scratch-adapters needs --out')
    model = pipe.build_model()
    ft_cfg = cfg.finetune
    if args.adapters:
        load_experts_into(model, args.adapters)
    if args.allow_scratch_adapters:
        ft_cfg = dataclasses.replace(ft_cfg, allow_scratch_adapters=True)
    train, _ = pipe.splits()
    trainer = Finetuner(ft_cfg, cfg.data.augment).fit(model, train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_module(model, out / 'model', stage='stage2', config_hash=config_hash(cfg),
                seed=cfg.seed, extra={'strategy': model.strategy})
    write_train_report(trainer.state_.report, out / 'train_report.txt')
    save_config(cfg, out / 'config.yaml')
    print(out)


def cmd_evaluate(args):
    pipe = _pipeline(args)
    cfg = pipe.config
    if args.model:
        model = pipe.load_model(args.model)
        _, test = pipe.splits()
        report = evaluate_volumes(model, test, cfg.eval, seed=cfg.seed,
                                  config_hash=config_hash(cfg))
    else:
        report = pipe.evaluate()
    if args.out:
        report.save(args.out)
    print(report.table().to_csv(index=False), end='')


def cmd_ablate(args):
    from samora.experiments import AblationMatrix, run_ablation
    cfg = _config(args)
    kw = {}
    if args.levels:
        kw['levels'] = args.levels
    matrix = AblationMatrix(args.axis, args.values, args.seeds, **kw)
    store = ArtifactStore(args.cache) if args.cache else None
    result = run_ablation(matrix, cfg, store, args.out, n_jobs=args.jobs,
                          progress=None if args.quiet else tqdm)
    print(result.table().to_csv(index=False), end='')


def cmd_export_heatmap(args):
    from samora.experiments import export_heatmap
    pipe = _pipeline(args)
    model = pipe.load_model(args.model)
    _, test = pipe.splits()
    if not 0 <= args.index < len(test):
        raise SamoraError('slice index {} out of range (test set has {} slices)'.format(
            args.index, len(test)))
    for p in export_heatmap(model, test.images[args.index], args.out):
        print(p)


def _report_values(path, metric):
    pv = pd.read_csv(Path(path) / 'volumes.csv', dtype={'case_id': str})
    return pv.groupby('case_id')[metric].mean()


def report_t_test(report_a, report_b, metric='dice', confidence=0.95):
    """
    Paired t-test between the per-case (class-averaged) metrics of two saved
    evaluation reports.

    Returns:
        pandas.DataFrame: a one-row frame with the :data:`STATS_COLUMNS`.
    """
    a = _report_values(report_a, metric)
    b = _report_values(report_b, metric)
    if set(a.index) != set(b.index):
        raise SamoraError('reports cover different cases')
    b = b.reindex(a.index)
    res = paired_t_test(a.values, b.values, confidence)
    return pd.DataFrame([{'metric': metric, 'n': res.n, 'mean_diff': res.mean_diff,
                          't': res.t, 'p': res.p, 'ci_low': res.ci_low,
                          'ci_high': res.ci_high}])[STATS_COLUMNS]


def cmd_stats(args):
    table = report_t_test(args.report_a, args.report_b, args.metric, args.confidence)
    print(table.to_csv(index=False), end='')


def cmd_run(args):
    pipe = _pipeline(args)
    result = pipe.run(args.out)
    print(result.report.summary())
    print('artifacts: {}'.format(result.output_dir))


def main(argv=None):
    "Entry point of the ``samora`` command."
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    log_to_stderr(level)
    try:
        args.func(args)
    except SamoraError as e:
        _log.error('%s', e)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
