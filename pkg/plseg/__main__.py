# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
import argparse
import json
import os
import sys
from os.path import join
from typing import List, Optional

from ovos_utils.log import LOG, init_service_logger

from plseg.config import ConfigError, load_config, parse_override, \
    write_resolved_config
from plseg.metrics import aggregate, evaluate
from plseg.network import load_checkpoint, save_checkpoint
from plseg.overlay import render_overlays
from plseg.phantom import make_dataset
from plseg.pipeline import predict_many, read_predictions, recist_rows, \
    write_predictions
from plseg.sweep import SWEEP_AXES, run_sweep
from plseg.trainer import ProgressiveTrainer, load_lesions
from plseg.volume import load_gt_mask, load_mask, load_volume, read_manifest

ERROR_RECORD_NAME = "error.json"


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides config seed")
    common.add_argument("--output-dir", help="overrides config output_dir")
    common.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value, repeatable")
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="plseg",
        description="Progressive lesion segmentation from single-slice "
                    "delineations")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("phantom-gen", parents=[common],
                        help="generate a synthetic phantom dataset")

    train = commands.add_parser("train", parents=[common],
                                help="progressive training")
    train.add_argument("--train-manifest")

    predict = commands.add_parser("predict", parents=[common],
                                  help="3D masks for every lesion")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--manifest", help="defaults to data.test_manifest")

    evaluate_cmd = commands.add_parser("evaluate", parents=[common],
                                       help="score predictions")
    evaluate_cmd.add_argument("--pred-dir", required=True)
    evaluate_cmd.add_argument("--gt-manifest",
                              help="defaults to data.test_manifest")

    sweep = commands.add_parser("sweep", parents=[common],
                                help="one run per value of a config axis")
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument("--values", required=True, nargs="+")

    overlay = commands.add_parser("overlay", parents=[common],
                                  help="contour overlays per slice")
    overlay.add_argument("--volume", required=True)
    overlay.add_argument("--mask", required=True)
    overlay.add_argument("--gt")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """
    defaults < config file < PLSEG_SEED < --set < dedicated flags
    """
    overrides = [parse_override(o) for o in args.overrides]
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.output_dir:
        flags["output_dir"] = args.output_dir
    if getattr(args, "train_manifest", None):
        flags["data"] = {"train_manifest": args.train_manifest}
    overrides.append(flags)
    return load_config(args.config, overrides)


def cmd_phantom_gen(args, config: dict):
    phantom = config["phantom"]
    make_dataset(int(phantom["n_train"]), int(phantom["n_test"]), phantom,
                 seed=config["seed"], output_dir=config["output_dir"])


def _lesions(manifest: str, config: dict):
    if not manifest:
        raise ConfigError("No lesion manifest configured")
    return load_lesions(read_manifest(manifest),
                        int(config["data"]["min_crop_px"]))


def cmd_train(args, config: dict):
    lesions = _lesions(config["data"]["train_manifest"], config)
    result = ProgressiveTrainer(config, config["output_dir"]).run(lesions)
    save_checkpoint(result.model, join(config["output_dir"], "model"),
                    iteration=result.report[-1].iteration,
                    seed=config["seed"])


def cmd_predict(args, config: dict):
    model, _ = load_checkpoint(args.checkpoint)
    lesions = _lesions(args.manifest or config["data"]["test_manifest"],
                       config)
    results = predict_many(model, lesions, config)
    write_predictions(results, config["output_dir"],
                      recist_rows(results, lesions))


def cmd_evaluate(args, config: dict):
    manifest = args.gt_manifest or config["data"]["test_manifest"]
    if not manifest:
        raise ConfigError("No ground-truth manifest configured")
    records = {r.lesion_id: r for r in read_manifest(manifest)}
    rows = []
    for entry in read_predictions(args.pred_dir):
        record = records.get(entry["lesion_id"])
        gt = load_gt_mask(record) if record else None
        if gt is None:
            LOG.warning(f"No ground truth for {entry['lesion_id']}")
            continue
        pred, spacing = load_mask(entry["mask"])
        rows.append(evaluate(pred, gt, spacing, entry["lesion_id"]))
    aggregate(rows, config).write(config["output_dir"])


def cmd_sweep(args, config: dict):
    train = _lesions(config["data"]["train_manifest"], config)
    test = _lesions(config["data"]["test_manifest"], config)
    run_sweep(config, args.axis, args.values, train, test,
              config["output_dir"])


def cmd_overlay(args, config: dict):
    volume = load_volume(args.volume)
    pred, _ = load_mask(args.mask)
    gt = load_mask(args.gt)[0] if args.gt else None
    render_overlays(volume, pred, config["output_dir"], gt)


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "overlay": cmd_overlay,
}


def _report_error(command: str, error: Exception,
                  output_dir: Optional[str]):
    record = {"command": command, "error": type(error).__name__,
              "message": str(error)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if output_dir:
        try:
            os.makedirs(output_dir, exist_ok=True)
            with open(join(output_dir, ERROR_RECORD_NAME), "w") as f:
                json.dump(record, f, indent=2, sort_keys=True)
        except OSError:
            LOG.exception(f"Could not write {ERROR_RECORD_NAME}")


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entry point"""
    args = build_parser().parse_args(argv)
    init_service_logger("plseg")
    LOG.set_level(args.log_level)
    output_dir = args.output_dir
    try:
        config = resolve_config(args)
        output_dir = config["output_dir"]
        write_resolved_config(config, output_dir)
        COMMANDS[args.command](args, config)
    except ConfigError as e:
        LOG.error(f"Invalid configuration: {e}")
        _report_error(args.command, e, output_dir)
        return 2
    except Exception as e:
        LOG.exception(f"{args.command} failed")
        _report_error(args.command, e, output_dir)
        return 1
    LOG.info(f"{args.command} finished, outputs in {output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
