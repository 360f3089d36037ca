# orchestrator.py
"""
Runs brushgym commands against one output directory.

Every command writes only under the output directory, which is locked for the
lifetime of the Orchestrator context so two runs cannot clobber each other.
"""
import csv
import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, Field

from canvas import BrushConfig, Canvas, StrokeRecord, blank_canvas, load_image, replay_strokes, save_image
from config import RunConfig, resolve_seed, save_resolved_config
from corpus import desk_corpus, desk_eval_images, load_reference_images, sample_patches
from errors import CorpusError, OutputLockedError, ShapeMismatchError
from glyph_fixtures import glyph_documents, load_glyph_directory, write_fixtures
from learn_bc import (glyph_pairs, glyph_scale, imitate_glyph, init_rl_from_bc, pairs_to_stroke_record,
                      parse_svg_strokes, rasterize_strokes, split_dataset, strokes_to_pairs, train_bc,
                      write_demo_dataset)
from learn_rl import evaluate_policy, rollout_image, train_rl
from objective import loss_half, loss_l2
from policy_net import NetworkSpec, PolicyParams, check_topology, init_params, load_checkpoint, save_checkpoint
from sim2real import (BrushSimulator, ProjectionTransform, calibrate_hybrid, correspondences_from_pitch,
                      export_trajectory, fit_projection, load_calibration_report, resimulate_trajectory,
                      trajectory_summary, write_calibration_report, write_trajectory_csv)

load_dotenv()
logger = logging.getLogger(__name__)

LOCK_NAME = ".brushgym.lock"
REFERENCE_FOOTER = (
    "Reference results at full scale (1000 patches of 400x400, cumulative reward / L2 loss): "
    "Behavior Cloning 20.15 / 512, Reinforcement Learning 97.74 / 1920, "
    "Combined Scheme 98.25 / 1485. Shown for context only; desk-scale runs are not comparable."
)


class EvalRow(BaseModel):
    method: str
    checkpoint: str
    cumulative_reward: float
    l2_loss: float
    loss_half: float
    strokes: float
    wall_ms: int = 0


class EvalReport(BaseModel):
    rows: List[EvalRow] = Field(default_factory=list)
    corpus: str
    seeds: List[int]
    patches: int
    patch_size: int

    def to_markdown(self) -> str:
        lines = [f"# Evaluation on {self.patches} patches of {self.patch_size}x{self.patch_size}",
                 "", f"Corpus: {self.corpus}. Seeds: {', '.join(str(s) for s in self.seeds)}.", "",
                 "| method | cumulative reward | L2 loss | loss_half | strokes | wall ms |",
                 "|---|---|---|---|---|---|"]
        for row in self.rows:
            lines.append(f"| {row.method} | {row.cumulative_reward:.4f} | {row.l2_loss:.6f} | "
                         f"{row.loss_half:.6f} | {row.strokes:.2f} | {row.wall_ms} |")
        lines += ["", REFERENCE_FOOTER, ""]
        return "\n".join(lines)


class Orchestrator:
    def __init__(self, config: RunConfig, output_dir: Optional[str | Path] = None, seed: Optional[int] = None):
        self.config = config
        self.output_dir = Path(output_dir or config.paths.output_dir)
        self.seed = resolve_seed(config, seed)
        self._lock_path = self.output_dir / LOCK_NAME
        self._locked = False

    # -- lifecycle ---------------------------------------------------------

    def __enter__(self) -> "Orchestrator":
        self.output_dir.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLockedError(f"{self.output_dir} is in use by another run ({LOCK_NAME} exists)")
        with os.fdopen(fd, "w") as handle:
            handle.write(str(os.getpid()))
        self._locked = True
        save_resolved_config(self.config, self.output_dir)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._locked:
            self._lock_path.unlink(missing_ok=True)
            self._locked = False

    # -- shared helpers ----------------------------------------------------

    @property
    def brush(self) -> BrushConfig:
        return self.config.environment.brush

    @property
    def channels(self) -> int:
        return self.config.environment.channels

    def network_spec(self) -> NetworkSpec:
        brush = self.brush
        return NetworkSpec.for_preset(self.config.network.preset, 2 * self.channels, brush.window_h,
                                      brush.window_w, self.config.network.init_log_std)

    def load_policy(self, checkpoint: str | Path) -> PolicyParams:
        params = load_checkpoint(checkpoint)
        check_topology(params, self.network_spec())
        return params

    def training_corpus(self) -> Dict[str, Canvas]:
        if self.config.paths.corpus:
            return load_reference_images(self.config.paths.corpus, self.channels)
        return desk_corpus(self.config.environment.canvas_size, channels=self.channels)

    def _write_json(self, name: str, payload: Any) -> Path:
        path = self.output_dir / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path

    # -- commands ----------------------------------------------------------

    def cmd_train_rl(self, curriculum: Optional[bool] = None,
                     init_from: Optional[str | Path] = None) -> Dict[str, Any]:
        """Train on the reference corpus; writes train_log.csv, checkpoints/ and policy.bgck."""
        training = self.config.training
        curriculum_config = training.curriculum
        if curriculum is not None:
            curriculum_config = curriculum_config.model_copy(update={"enabled": curriculum})
        references = self.training_corpus()
        if init_from is not None:
            params = init_rl_from_bc(self.load_policy(init_from), self.network_spec(),
                                     np.random.default_rng(self.seed))
            logger.info(f"Initialized trunk and policy head from {init_from}")
        else:
            params = init_params(self.network_spec(), np.random.default_rng(self.seed))

        checkpoint_dir = self.output_dir / "checkpoints"
        checkpoint_dir.mkdir(exist_ok=True)
        logger.info(f"Training on {len(references)} references for {training.episodes} episodes "
                    f"(curriculum {'on' if curriculum_config.enabled else 'off'}, seed {self.seed})")
        result = train_rl(params, references, self.brush, training.ppo, curriculum_config, training.reward,
                          episodes=training.episodes, seed=self.seed, batch_episodes=training.batch_episodes,
                          workers=training.workers, pen_up_width=self.config.environment.pen_up_width,
                          log_path=self.output_dir / "train_log.csv", checkpoint_dir=checkpoint_dir,
                          checkpoint_every=training.checkpoint_every, log_wall_clock=training.log_wall_clock)
        final = self.output_dir / "policy.bgck"
        save_checkpoint(final, result.params)
        eval_return = evaluate_policy(result.params, references, self.brush, curriculum_config.horizon_cap,
                                      training.eval_starts, self.seed, self.config.environment.pen_up_width)
        logger.info(f"Deterministic evaluation return {eval_return:.4f}")
        return {"checkpoint": str(final), "episodes": result.curriculum.episode,
                "horizon": result.curriculum.horizon, "skipped_episodes": result.skipped_episodes,
                "skipped_updates": result.skipped_updates,
                "final_return": result.log_rows[-1]["mean_return"] if result.log_rows else None,
                "eval_return": eval_return}

    def cmd_train_bc(self, glyph_dir: Optional[str | Path] = None) -> Dict[str, Any]:
        """Parse the glyph corpus, write the demo dataset and fit the policy to it."""
        glyph_dir = glyph_dir or self.config.paths.glyphs
        if glyph_dir is None:
            raise CorpusError("train-bc needs a glyph directory (--corpus or paths.glyphs)")
        if not Path(glyph_dir).is_dir():
            raise CorpusError(f"glyph directory {glyph_dir} does not exist")
        documents = load_glyph_directory(glyph_dir)
        if not documents:
            raise CorpusError(f"no SVG glyphs in {glyph_dir}")

        bc = self.config.bc
        size = bc.glyph_size
        per_glyph, failures = glyph_pairs(documents, self.brush, size, bc.w_demo)
        if not per_glyph:
            raise CorpusError(f"none of the {len(documents)} glyphs produced demo pairs",
                              details={"failures": failures})
        rng = np.random.default_rng(self.seed)
        names = sorted(per_glyph)
        train_names, held_names = split_dataset(names, bc.holdout_fraction, rng)
        train_pairs = [pair for name in train_names for pair in per_glyph[name]]
        holdout_pairs = [pair for name in held_names for pair in per_glyph[name]]
        write_demo_dataset(self.output_dir / "demos.bin", train_pairs,
                           {"glyphs": train_names, "w_demo": bc.w_demo})

        params = init_params(self.network_spec(), np.random.default_rng(self.seed))
        params, curve = train_bc(params, train_pairs, bc, rng, holdout=holdout_pairs)
        with open(self.output_dir / "bc_log.csv", "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["epoch", "loss"])
            writer.writerows([epoch, f"{loss:.9f}"] for epoch, loss in enumerate(curve))
        checkpoint = self.output_dir / "policy.bgck"
        save_checkpoint(checkpoint, params)

        improved = []
        for name in held_names:
            strokes = parse_svg_strokes(documents[name], scale=glyph_scale(documents[name], size))
            reference = rasterize_strokes(strokes, (size, size, 1), self.brush, bc.w_demo)
            painted = imitate_glyph(params, reference, per_glyph[name][0].position, len(per_glyph[name]),
                                    self.brush, self.config.environment.pen_up_width)
            blank = blank_canvas(size, size, 1, self.brush.background)
            improved.append(loss_half(painted, reference) <= 0.5 * loss_half(blank, reference))
        if failures:
            logger.warning(f"{len(failures)} glyphs were skipped")
        return {"checkpoint": str(checkpoint), "glyphs": len(names), "holdout_glyphs": len(held_names),
                "pairs": len(train_pairs), "warnings": len(failures), "failures": failures,
                "initial_loss": curve[0], "best_loss": min(curve),
                "holdout_halved_fraction": float(np.mean(improved)) if improved else None}

    def cmd_rollout(self, checkpoint: str | Path, reference_path: str | Path,
                    max_strokes: Optional[int] = None, frames: bool = False) -> Dict[str, Any]:
        """Paint a reference image; writes rollout.png, strokes.json and optional frames/."""
        params = self.load_policy(checkpoint)
        reference = load_image(reference_path)
        if reference.shape[2] != self.channels:
            raise ShapeMismatchError(f"reference has {reference.shape[2]} channels, "
                                     f"the environment expects {self.channels}")
        frame_dir = self.output_dir / "frames"
        if frames:
            frame_dir.mkdir(exist_ok=True)

        def save_frame(number: int, canvas: Canvas) -> None:
            save_image(frame_dir / f"stroke_{number:04d}.png", canvas)

        settings = self.config.eval
        result = rollout_image(params, reference, self.brush, settings.thresh_sim,
                               max_strokes if max_strokes is not None else settings.max_strokes,
                               settings.max_dabs, np.random.default_rng(self.seed),
                               self.config.environment.pen_up_width, save_frame if frames else None)
        save_image(self.output_dir / "rollout.png", result.canvas)
        self._write_json("strokes.json", {
            "reference": str(reference_path),
            "shape": list(reference.shape),
            "strokes": [stroke.model_dump() for stroke in result.strokes],
            "initial_loss_half": result.initial_loss,
            "final_loss_half": result.final_loss,
        })
        logger.info(f"Rollout used {len(result.strokes)} strokes, loss_half "
                    f"{result.initial_loss:.4f} -> {result.final_loss:.4f}")
        return {"strokes": len(result.strokes), "initial_loss_half": result.initial_loss,
                "final_loss_half": result.final_loss, "image": str(self.output_dir / "rollout.png")}

    def _projection(self) -> ProjectionTransform:
        calibration = self.config.calibration
        pairs = calibration.correspondences or correspondences_from_pitch(
            calibration.pixel_pitch_mm, calibration.origin_mm, calibration.tilt_deg)
        return fit_projection(pairs)

    def _simulator(self) -> BrushSimulator:
        return BrushSimulator(**self.config.calibration.simulator.model_dump())

    def cmd_calibrate(self, strokes_path: Optional[str | Path] = None) -> Dict[str, Any]:
        """Calibrate pressure and projection; export and re-simulate a demo trajectory."""
        calibration = self.config.calibration
        result = calibrate_hybrid(self._simulator(), calibration.a_min, calibration.a_max, calibration.a_step,
                                  calibration.probe_count, calibration.one_sided)
        transform = self._projection()
        write_calibration_report(self.output_dir / "calibration.json", result, transform)

        if strokes_path is not None:
            strokes, shape = self._read_strokes(strokes_path)
        else:
            # first fixture glyph as the demo trajectory
            size = self.config.bc.glyph_size
            document = next(iter(glyph_documents(1).values()))
            glyph_strokes = parse_svg_strokes(document, scale=glyph_scale(document, size))
            strokes = [pairs_to_stroke_record(strokes_to_pairs(glyph_strokes, self.brush, (size, size, 1),
                                                               self.config.bc.w_demo))]
            shape = (size, size, 1)
        trajectory = export_trajectory(strokes, result.mapping, transform, self.brush, calibration.style,
                                       np.random.default_rng(self.seed), calibration.travel_height_mm)
        write_trajectory_csv(self.output_dir / "trajectory_demo.csv", trajectory)
        simulated = replay_strokes(blank_canvas(*shape, background=self.brush.background), strokes, self.brush)
        resimulated = resimulate_trajectory(trajectory, transform, self._simulator(), self.brush, shape)
        return {"p_sat": result.p_sat, "mapping_points": len(result.mapping.widths),
                "width_calls": result.width_calls, "deformation_calls": result.deformation_calls,
                "projection_residual": transform.residual,
                "closed_loop_loss_half": loss_half(resimulated, simulated),
                **trajectory_summary(trajectory)}

    def _read_strokes(self, path: str | Path):
        payload = json.loads(Path(path).read_text())
        strokes = [StrokeRecord.model_validate(s) for s in payload["strokes"]]
        shape = tuple(payload.get("shape", (self.config.environment.canvas_size,) * 2 + (self.channels,)))
        return strokes, shape

    def cmd_export(self, strokes_path: str | Path, calibration_path: str | Path) -> Dict[str, Any]:
        """Stroke list + calibration report -> trajectory.csv."""
        mapping, transform = load_calibration_report(calibration_path)
        strokes, _ = self._read_strokes(strokes_path)
        calibration = self.config.calibration
        trajectory = export_trajectory(strokes, mapping, transform, self.brush, calibration.style,
                                       np.random.default_rng(self.seed), calibration.travel_height_mm)
        path = self.output_dir / "trajectory.csv"
        write_trajectory_csv(path, trajectory)
        return {"trajectory": str(path), "checksum": trajectory.checksum, **trajectory_summary(trajectory)}

    def cmd_eval(self, checkpoints: List[str | Path]) -> EvalReport:
        """Paint the same seeded patches with every checkpoint; writes eval_report.json and .md."""
        if not checkpoints:
            raise CorpusError("eval needs at least one checkpoint")
        settings = self.config.eval
        if self.config.paths.corpus:
            images = load_reference_images(self.config.paths.corpus, self.channels)
            corpus = f"images from {self.config.paths.corpus}"
        else:
            images = desk_eval_images(max(96, settings.patch_size), channels=self.channels)
            corpus = "procedural desk images (substitute corpus)"
        patches = sample_patches(images, settings.patches, settings.patch_size, np.random.default_rng(self.seed))

        rows = []
        for checkpoint in checkpoints:
            params = self.load_policy(checkpoint)
            rewards, l2, half, strokes = [], [], [], []
            started = time.perf_counter()
            for index, patch_id in enumerate(sorted(patches)):
                reference = patches[patch_id]
                result = rollout_image(params, reference, self.brush, settings.thresh_sim, settings.max_strokes,
                                       settings.max_dabs, np.random.default_rng([self.seed, index]),
                                       self.config.environment.pen_up_width)
                rewards.append(float(np.sum(result.rewards)))
                l2.append(loss_l2(result.canvas, reference))
                half.append(result.final_loss)
                strokes.append(len(result.strokes))
            wall_ms = int((time.perf_counter() - started) * 1000) if self.config.training.log_wall_clock else 0
            rows.append(EvalRow(method=Path(checkpoint).stem if Path(checkpoint).stem != "policy"
                                else Path(checkpoint).parent.name or "policy",
                                checkpoint=str(checkpoint), cumulative_reward=float(np.mean(rewards)),
                                l2_loss=float(np.mean(l2)), loss_half=float(np.mean(half)),
                                strokes=float(np.mean(strokes)), wall_ms=wall_ms))
            logger.info(f"{rows[-1].method}: reward {rows[-1].cumulative_reward:.4f}, L2 {rows[-1].l2_loss:.6f}")

        report = EvalReport(rows=rows, corpus=corpus, seeds=[self.seed], patches=settings.patches,
                            patch_size=settings.patch_size)
        self._write_json("eval_report.json", report.model_dump())
        (self.output_dir / "eval_report.md").write_text(report.to_markdown())
        return report

    def cmd_fixtures(self, directory: Optional[str | Path] = None) -> Dict[str, Any]:
        target = Path(directory) if directory is not None else self.output_dir / "glyphs"
        written = write_fixtures(target)
        return {"directory": str(target), "glyphs": len(written)}
