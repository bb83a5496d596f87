"""Stage runner: trains and evaluates every experiment into one run directory.

Layout of a run directory::

    checkpoints/  *.safetensors
    metrics/      <stage>.json   (no wall-clock values, so reruns hash-equal)
    tables/       CSV / text tables
    plots/        PNG figures
    logs/         JSON-lines training logs
    manifests/    <stage>.json   (config and stage hashes, checkpoint hashes, files, timings)
    datasets.json evaluation-set digests, checked before every evaluation
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .autoencoder import erf as erf_mod
from .autoencoder.model import AutoencoderConfig
from .autoencoder.receptive import (
    analytic_influence_field,
    analytic_receptive_field,
    autoencoder_layer_specs,
    bundled_specs,
    format_fraction,
    format_table,
    influence_field_expanded,
    influence_field_table,
    receptive_field_table,
)
from .autoencoder.train import AETrainConfig, load_autoencoder, reconstruction_psnr, save_autoencoder, train_autoencoder
from .checkpoint import file_sha256, load_checkpoint
from .colorop.evaluate import DEFAULT_GRID, GAMMA_SWEEP, evaluate_color, render_color_grid
from .colorop.model import ColorOpConfig, ColorTrainConfig, load_color_operator, save_color_operator, train_color_operator
from .colorop.ops import ColorParams
from .compositor.blend import out_of_range_fraction, project_alpha_shift
from .compositor.evaluate import evaluate_equivalence, prepare, sdf_error_profile
from .compositor.metrics import mse, perceptual_surrogate
from .config import config_hash
from .data.composites import KINDS, make_composite_set
from .data.images import array_hash, make_image_set
from .data.io import atomic_write_text
from .data.masks import MaskFamily, generate_mask, soft_sigma_for
from .decformer.analysis import ablation_configs, ablation_table_csv, decformer_method, internals_visualization, render_internals, AblationRow
from .decformer.model import DecformerConfig
from .decformer.train import DecformerTrainConfig, build_bank, load_decformer, save_decformer, train_decformer
from .flow.evaluate import evaluate_inpainting
from .flow.model import FlowConfig
from .flow.sampling import sample
from .flow.train import FinetuneConfig, FlowTrainConfig, finetune_dual_sigma, load_flow, save_flow, train_flow

log = logging.getLogger(__name__)

STAGES = (
    "rf-calc",
    "train-vae",
    "erf",
    "train-compositor",
    "eval-equivalence",
    "eval-sdf",
    "ablate",
    "train-flow",
    "finetune-dual-sigma",
    "eval-inpaint",
    "train-colorop",
    "eval-color",
)

DEPENDS = {
    "rf-calc": (),
    "train-vae": (),
    "erf": ("train-vae",),
    "train-compositor": ("train-vae",),
    "eval-equivalence": ("train-compositor",),
    "eval-sdf": ("train-compositor",),
    "ablate": ("train-vae",),
    "train-flow": ("train-vae",),
    "finetune-dual-sigma": ("train-flow",),
    "eval-inpaint": ("train-compositor", "finetune-dual-sigma"),
    "train-colorop": ("train-vae",),
    "eval-color": ("train-colorop",),
}

# config entries each stage reads; a stage's hash also folds in its upstream hashes,
# so editing one section reruns only the stages downstream of it
READS = {
    "rf-calc": (),
    "train-vae": ("data", "autoencoder"),
    "erf": ("data", "erf"),
    "train-compositor": ("data", "decformer"),
    "eval-equivalence": ("data",),
    "eval-sdf": ("data", "sdf"),
    "ablate": ("data", "decformer", "ablation"),
    "train-flow": ("data", "flow.model", "flow.train"),
    "finetune-dual-sigma": ("data", "flow.finetune", "inpaint.lambda"),
    "eval-inpaint": ("data", "inpaint"),
    "train-colorop": ("data", "colorop"),
    "eval-color": ("data", "color_eval"),
}

EQUIVALENCE_METHODS = ("ground_truth", "heuristic_area", "heuristic_bilinear", "heuristic_nearest", "alpha_clamped", "oracle", "decformer")
SDF_METHODS = ("ground_truth", "heuristic_area", "alpha_clamped", "oracle", "decformer")


class PipelineError(RuntimeError):
    kind = "pipeline_error"

    def payload(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class MissingDependency(PipelineError):
    kind = "missing_dependency"

    def __init__(self, stage: str, prerequisite: str) -> None:
        super().__init__(f"stage '{stage}' needs the outputs of '{prerequisite}'; run `pelc run {prerequisite}` first")
        self.stage = stage
        self.prerequisite = prerequisite

    def payload(self) -> dict:
        return {**super().payload(), "stage": self.stage, "prerequisite": self.prerequisite}


class DatasetMismatch(PipelineError):
    kind = "dataset_mismatch"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, torch.Tensor):
        return _jsonable(obj.tolist())
    return obj


def write_json(path: Path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")


class Pipeline:
    def __init__(self, cfg: dict, out: str | Path, workers: int = 1) -> None:
        self.cfg = cfg
        self.out = Path(out)
        self.hash = config_hash(cfg)
        self._stage_hashes: dict[str, str] = {}
        self.workers = max(1, int(workers))
        self._cache: dict[str, object] = {}
        for sub in ("checkpoints", "metrics", "tables", "plots", "logs", "manifests"):
            (self.out / sub).mkdir(parents=True, exist_ok=True)

    # ---- bookkeeping -------------------------------------------------------------
    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def manifest_path(self, stage: str) -> Path:
        return self.path("manifests", f"{stage}.json")

    def manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    def stage_hash(self, stage: str) -> str:
        """Hash of the config entries ``stage`` reads, the top-level seed and its upstream stage hashes."""
        if stage not in self._stage_hashes:
            reads = {}
            for key in READS[stage]:
                node = self.cfg
                for part in key.split("."):
                    node = node[part]
                reads[key] = node
            doc = {"stage": stage, "seed": self.cfg["seed"], "reads": reads, "upstream": [self.stage_hash(d) for d in DEPENDS[stage]]}
            blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
            self._stage_hashes[stage] = hashlib.sha256(blob).hexdigest()[:16]
        return self._stage_hashes[stage]

    def _complete(self, stage: str) -> bool:
        man = self.manifest(stage)
        if man is None:
            return False
        files = [*man.get("checkpoints", {}), *man.get("metrics", []), *man.get("artifacts", [])]
        return all(self.path(f).exists() for f in files)

    def _check_deps(self, stage: str) -> None:
        for dep in DEPENDS[stage]:
            if not self._complete(dep):
                raise MissingDependency(stage, dep)

    def run(self, stage: str, force: bool = False) -> dict:
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
        self._check_deps(stage)
        man = self.manifest(stage)
        if not force and man and man.get("stage_hash") == self.stage_hash(stage) and self._complete(stage):
            log.info("stage %s already complete, skipping", stage)
            return man
        torch.set_num_threads(self.workers)
        t0 = time.perf_counter()
        outputs = getattr(self, "_" + stage.replace("-", "_"))()
        man = {
            "stage": stage,
            "config_hash": self.hash,
            "stage_hash": self.stage_hash(stage),
            "seed": self.cfg["seed"],
            "checkpoints": {c: file_sha256(self.path(c)) for c in outputs.get("checkpoints", [])},
            "metrics": outputs.get("metrics", []),
            "artifacts": outputs.get("artifacts", []),
            "wall_clock_s": round(time.perf_counter() - t0, 3),
        }
        write_json(self.manifest_path(stage), man)
        return man

    def run_all(self, stages=STAGES, force: bool = False) -> list[dict]:
        return [self.run(s, force=force) for s in stages]

    def _metrics(self, stage: str, payload: dict) -> str:
        rel = f"metrics/{stage}.json"
        write_json(self.path(rel), {"stage": stage, "stage_hash": self.stage_hash(stage), **payload})
        return rel

    def _seed(self, section_seed: int) -> int:
        return int(self.cfg["seed"]) + int(section_seed)

    # ---- data ------------------------------------------------------------------------
    def _memo(self, key: str, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def size(self) -> int:
        return int(self.cfg["data"]["image_size"])

    def train_images(self) -> np.ndarray:
        d = self.cfg["data"]
        return self._memo("train", lambda: make_image_set(d["n_train"], "train", self.cfg["seed"], self.size))

    def val_images(self) -> np.ndarray:
        d = self.cfg["data"]
        return self._memo("val", lambda: make_image_set(d["n_val"], "train", self.cfg["seed"] + 1, self.size))

    def heldout_images(self, n: int, offset: int = 0) -> np.ndarray:
        d = self.cfg["data"]
        return self._memo(f"heldout{n}_{offset}", lambda: make_image_set(n, "heldout", d["eval_seed"] + offset, self.size))

    def _verify(self, name: str, digest: str) -> None:
        p = self.path("datasets.json")
        known = json.loads(p.read_text()) if p.exists() else {}
        if name in known and known[name] != digest:
            raise DatasetMismatch(f"evaluation set '{name}' changed: expected {known[name][:12]}, got {digest[:12]}")
        if name not in known:
            known[name] = digest
            write_json(p, known)

    def eval_set(self):
        def build():
            d = self.cfg["data"]
            n = d["n_eval"]
            cset = make_composite_set(self.heldout_images(n, 0), self.heldout_images(n, 1), d["eval_seed"], KINDS, soft_sigma_for(self.size))
            self._verify("eval_composites", cset.digest())
            return cset

        return self._memo("eval_set", build)

    def prepared(self):
        return self._memo("prepared", lambda: prepare(self.ae(), self.eval_set(), halo_px=self.cfg["data"]["halo_px"]))

    # ---- models ----------------------------------------------------------------------
    def ae(self):
        return self._memo("ae", lambda: load_autoencoder(self.path("checkpoints", "autoencoder.safetensors")))

    def decformer(self):
        return self._memo("decformer", lambda: load_decformer(self.path("checkpoints", "decformer.safetensors")))

    def _decformer_cfgs(self) -> tuple[DecformerConfig, DecformerTrainConfig]:
        sec = self.cfg["decformer"]
        ae = self.ae()
        model = DecformerConfig(**{**sec["model"], "latent_channels": ae.latent_channels, "f": ae.f, "halo_px": self.cfg["data"]["halo_px"]})
        model = replace(model, seed=self._seed(model.seed))
        train = DecformerTrainConfig(**sec["train"])
        return model, replace(train, seed=self._seed(train.seed))

    def _bank(self):
        _, train = self._decformer_cfgs()
        return self._memo("bank", lambda: build_bank(self.ae(), self.train_images(), train.bank_size, train.seed, train.max_feather))

    def _val_bank(self):
        _, train = self._decformer_cfgs()
        return self._memo("val_bank", lambda: build_bank(self.ae(), self.val_images(), train.val_size, train.seed + 10_000, train.max_feather))

    # ---- stages ----------------------------------------------------------------------
    def _rf_calc(self) -> dict:
        enc, dec = bundled_specs("flux_encoder"), bundled_specs("flux_decoder")
        tables = [
            format_table(receptive_field_table(enc), "Encoder receptive field (pixels)"),
            format_table(influence_field_table(dec), "Decoder influence field (pixels)", with_upscale=True),
            format_table(receptive_field_table(dec), "Decoder receptive field (latents)"),
        ]
        text = "\n\n".join(tables) + "\n"
        atomic_write_text(self.path("tables", "rf_tables.txt"), text)
        print(text)
        ae_cfg = AutoencoderConfig(**self.cfg["autoencoder"]["model"])
        toy_enc, toy_dec = autoencoder_layer_specs(ae_cfg, "encoder"), autoencoder_layer_specs(ae_cfg, "decoder")
        frac = format_fraction
        payload = {
            "flux": {
                "encoder_rf": frac(analytic_receptive_field(enc)),
                "decoder_influence": frac(analytic_influence_field(dec)),
                "decoder_rf": frac(analytic_receptive_field(dec)),
                "encoder_rows": [frac(r.cumulative) for r in receptive_field_table(enc)],
                "decoder_influence_rows": [frac(r.cumulative) for r in influence_field_table(dec)],
                "decoder_rf_rows": [frac(r.cumulative) for r in receptive_field_table(dec)],
            },
            "toy": {
                "encoder_rf": frac(analytic_receptive_field(toy_enc)),
                "decoder_influence": frac(analytic_influence_field(toy_dec)),
                "decoder_influence_expanded": frac(influence_field_expanded(toy_dec)),
                "decoder_rf": frac(analytic_receptive_field(toy_dec)),
            },
        }
        return {"metrics": [self._metrics("rf-calc", payload)], "artifacts": ["tables/rf_tables.txt"]}

    def _train_vae(self) -> dict:
        sec = self.cfg["autoencoder"]
        model_cfg = AutoencoderConfig(**sec["model"])
        train = AETrainConfig(**sec["train"])
        train = replace(train, seed=self._seed(train.seed))
        ae, history = train_autoencoder(self.train_images(), model_cfg, train, self.val_images())
        ckpt = "checkpoints/autoencoder.safetensors"
        save_autoencoder(self.path(ckpt), ae, seed=train.seed, config_hash=self.hash)
        self._cache.pop("ae", None)
        ae = self.ae()
        held = torch.from_numpy(self.heldout_images(self.cfg["data"]["n_eval"])).float()
        payload = {
            "history": history,
            "recon_psnr_train": reconstruction_psnr(ae, torch.from_numpy(self.val_images()).float()),
            "recon_psnr_heldout": reconstruction_psnr(ae, held),
            "latent_stats": asdict(ae.stats()),
            "train_hash": array_hash(self.train_images()),
        }
        return {"checkpoints": [ckpt], "metrics": [self._metrics("train-vae", payload)]}

    def _erf(self) -> dict:
        ae = self.ae()
        e = self.cfg["erf"]
        images = self.heldout_images(self.cfg["data"]["n_eval"])
        dec = erf_mod.decoder_erf_report(ae, images, e["n_probes"], seed=self.cfg["seed"], eps=e["eps"])
        enc = erf_mod.encoder_erf_report(ae, images, e["n_probes"], seed=self.cfg["seed"], delta=e["delta"])
        H = W = self.size
        patch = erf_mod.patch_radius_fraction(ae.f, H, W)
        # share of decoder-probe energy falling outside the aligned f x f patch
        ae64 = erf_mod.as_float64(ae)
        rng = np.random.default_rng(self.cfg["seed"])
        outside = []
        with torch.no_grad():
            for _ in range(min(e["n_probes"], 16)):
                z = ae64.encode(torch.from_numpy(images[int(rng.integers(len(images)))]).double()[None])
                i, j = (int(v) for v in rng.integers(z.shape[-1], size=2))
                en = erf_mod.erf_probe_decoder(ae64, z, (i, j), e["eps"]) ** 2
                inside = en[i * ae.f : (i + 1) * ae.f, j * ae.f : (j + 1) * ae.f].sum()
                outside.append(float(1 - inside / en.sum()))
            z = ae64.encode(torch.from_numpy(images[0]).double()[None])
        grad = erf_mod.erf_probe_gradient(ae64, z, (H // 2 - 2, W // 2 - 2), 5)
        np.savez(self.path("metrics", "erf_maps.npz"), decoder=dec.erf_energy_map, encoder=enc.erf_energy_map, gradient=grad)
        self._plot_energy_curves({"decoder": dec, "encoder": enc}, self.path("plots", "erf_energy_curves.png"))
        payload = {
            "decoder": {**dec.summary(), "curve": [dec.curve[0], dec.curve[1]]},
            "encoder": {**enc.summary(), "curve": [enc.curve[0], enc.curve[1]]},
            "patch_radius_fraction": patch,
            "decoder_energy_outside_patch": {"mean": float(np.mean(outside)), "min": float(np.min(outside))},
            "gradient_peak": list(np.unravel_index(int(np.argmax(grad)), grad.shape)),
            "eps": e["eps"],
            "delta": e["delta"],
        }
        return {"metrics": [self._metrics("erf", payload)], "artifacts": ["metrics/erf_maps.npz", "plots/erf_energy_curves.png"]}

    @staticmethod
    def _plot_energy_curves(reports: dict, path: Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        for name, rep in reports.items():
            ax.plot(rep.curve[0], rep.curve[1], label=f"{name} (r90={rep.r90:.3f})")
        ax.set_xlabel("radius / diagonal")
        ax.set_ylabel("cumulative energy")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)

    def _train_compositor(self) -> dict:
        model_cfg, train = self._decformer_cfgs()
        model, records = train_decformer(
            self.ae(), self.train_images(), model_cfg, train,
            log_path=self.path("logs", "decformer.jsonl"), bank=self._bank(), val_bank=self._val_bank(),
        )
        ckpt = "checkpoints/decformer.safetensors"
        save_decformer(self.path(ckpt), model, seed=train.seed, config_hash=self.hash)
        self._cache.pop("decformer", None)
        stages = []
        for r in records:
            if not stages or stages[-1] != r["stage"]:
                stages.append(r["stage"])
        payload = {"n_params": model.n_params(), "stage_sequence": stages, "final": records[-1] if records else {}}
        return {"checkpoints": [ckpt], "metrics": [self._metrics("train-compositor", payload)], "artifacts": ["logs/decformer.jsonl"]}

    def _method(self, name: str):
        return decformer_method(self.decformer()) if name == "decformer" else name

    def _eval_equivalence(self) -> dict:
        ae, prep = self.ae(), self.prepared()
        reports = {}
        for name in EQUIVALENCE_METHODS:
            reports[name] = evaluate_equivalence(ae, self._method(name), prep, name=name)
        out_of_range = {}
        for kind in prep.masks:
            r = out_of_range_fraction(prep.z_a.double(), prep.z_b.double(), prep.z_t[kind].double())
            out_of_range[kind] = asdict(r)
        # decode error of the best alpha-only blend against the autoencoder's own noise floor
        with torch.no_grad():
            zt = prep.z_t["binary"]
            star = project_alpha_shift(prep.z_a.double(), prep.z_b.double(), zt.double())
            alpha_only = ae.decode(star.apply_alpha_only(prep.z_a.double(), prep.z_b.double()).float()).clamp(0, 1)
            target = prep.target["binary"]
            err = mse(alpha_only, target).double()
            roundtrip = ae.decode(ae.encode(target)).clamp(0, 1)
            floor = mse(roundtrip, target).double()
            x_comp = (1 - prep.masks["binary"][:, None]) * torch.from_numpy(self.eval_set().x_a) + prep.masks["binary"][:, None] * torch.from_numpy(self.eval_set().x_b)
            recon_floor = mse(target, x_comp).double()
        floor_mean = float(floor.mean())
        non_eq = {
            "alpha_only_mse": err.tolist(),
            "roundtrip_floor_mse": floor_mean,
            "recon_floor_mse": float(recon_floor.mean()),
            "fraction_above_10x_floor": float((err > 10 * floor_mean).double().mean()),
            "fraction_above_10x_recon_floor": float((err > 10 * recon_floor.mean()).double().mean()),
            "max_alpha_only_mse": float(err.max()),
        }
        payload = {
            "dataset_hash": prep.digest,
            "methods": {k: v.to_dict() for k, v in reports.items()},
            "per_sample": {k: v.per_sample for k, v in reports.items() if k in ("heuristic_area", "decformer")},
            "out_of_range": out_of_range,
            "non_equivalence": non_eq,
        }
        csv_rows = "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports.values()))
        atomic_write_text(self.path("tables", "equivalence.csv"), csv_rows)
        internals = self._internals()
        return {"metrics": [self._metrics("eval-equivalence", {**payload, "internals": internals})], "artifacts": ["tables/equivalence.csv", "plots/internals.png"]}

    def _internals(self) -> dict:
        prep = self.prepared()
        model = self.decformer()
        kind = "binary"
        stats = {"shift_mass_in_halo": [], "halo_area": [], "interior_alpha_error": [], "heuristic_channel_var": []}
        first = None
        for i in range(min(32, len(prep))):
            it = internals_visualization(model, prep.z_a[i], prep.z_b[i], prep.z_t[kind][i], prep.masks[kind][i].numpy(), prep.f)
            first = first or it
            mass, area = it.shift_mass_in_halo()
            stats["shift_mass_in_halo"].append(mass)
            stats["halo_area"].append(area)
            stats["interior_alpha_error"].append(it.interior_alpha_error(prep.f, self.cfg["data"]["halo_px"]))
            stats["heuristic_channel_var"].append(it.channel_variance())
        render_internals(first, self.path("plots", "internals.png"))
        return {k: float(np.nanmean(v)) for k, v in stats.items()}

    def _eval_sdf(self) -> dict:
        ae, prep = self.ae(), self.prepared()
        kind = self.cfg["sdf"]["kind"]
        payload, artifacts = {"kind": kind, "halo_px": self.cfg["data"]["halo_px"], "profiles": {}}, []
        for name in SDF_METHODS:
            prof = sdf_error_profile(ae, self._method(name), prep, kind)
            payload["profiles"][name] = {
                scale: {"bins": p.bins, "mean": p.mean, "count": p.count, "flagged": p.flagged} for scale, p in prof.items()
            }
            for scale, p in prof.items():
                rel = f"tables/sdf_{name}_{scale}.csv"
                atomic_write_text(self.path(rel), p.to_csv())
                artifacts.append(rel)
        self._plot_sdf(payload["profiles"], self.path("plots", "sdf_profiles.png"))
        artifacts.append("plots/sdf_profiles.png")
        return {"metrics": [self._metrics("eval-sdf", payload)], "artifacts": artifacts}

    @staticmethod
    def _plot_sdf(profiles: dict, path: Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for ax, scale in zip(axes, ("pixel", "latent")):
            for name, prof in profiles.items():
                p = prof[scale]
                ok = ~np.asarray(p["flagged"])
                ax.plot(np.asarray(p["bins"])[ok] + 0.5, np.asarray(p["mean"])[ok], label=name)
            ax.axvline(0, color="k", lw=0.5)
            ax.set_title(f"{scale} scale")
            ax.set_xlabel("signed distance (px)" if scale == "pixel" else "signed distance (latent sites)")
            ax.set_yscale("symlog", linthresh=1e-5)
        axes[0].set_ylabel("mean squared error")
        axes[1].legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)

    def _ablate(self) -> dict:
        from .decformer.analysis import ablation_suite

        a = self.cfg["ablation"]
        model_cfg, train = self._decformer_cfgs()
        train = replace(train, steps=int(a["steps"]))
        models = {}
        ckpts = []
        for name in a["names"]:
            for seed in a["seeds"]:
                rel = f"checkpoints/ablation/{name}_s{seed}.safetensors"
                # reuse a finished variant only if it was trained under the same inputs
                if self.path(rel).exists() and load_checkpoint(self.path(rel))[1].get("stage_hash") == self.stage_hash("ablate"):
                    models[(name, seed)] = load_decformer(self.path(rel))
                else:
                    c, t = ablation_configs(name, replace(model_cfg, seed=self._seed(seed)), replace(train, seed=self._seed(seed)))
                    model, _ = train_decformer(self.ae(), self.train_images(), c, t, bank=self._bank(), val_bank=self._val_bank())
                    self.path(rel).parent.mkdir(parents=True, exist_ok=True)
                    save_decformer(self.path(rel), model, ablation=name, seed=seed, config_hash=self.hash, stage_hash=self.stage_hash("ablate"))
                    models[(name, seed)] = model
                ckpts.append(rel)
        rows = ablation_suite(self.ae(), self.train_images(), self.prepared(), model_cfg, train, seeds=a["seeds"], names=a["names"], models=models)
        atomic_write_text(self.path("tables", "ablation.csv"), ablation_table_csv(rows))
        payload = {"rows": [asdict(r) for r in rows], "steps": a["steps"]}
        return {"checkpoints": ckpts, "metrics": [self._metrics("ablate", payload)], "artifacts": ["tables/ablation.csv"]}

    def _flow_latents(self) -> torch.Tensor:
        ae = self.ae()

        def build():
            x = torch.from_numpy(self.train_images()).float()
            with torch.no_grad():
                return torch.cat([ae.encode(x[i : i + 256]) for i in range(0, len(x), 256)])

        return self._memo("flow_latents", build)

    def _flow_cfg(self) -> FlowConfig:
        cfg = FlowConfig(**{**self.cfg["flow"]["model"], "latent_channels": self.ae().latent_channels})
        return replace(cfg, seed=self._seed(cfg.seed))

    def _train_flow(self) -> dict:
        train = FlowTrainConfig(**self.cfg["flow"]["train"])
        train = replace(train, seed=self._seed(train.seed))
        flow, history = train_flow(self._flow_latents(), self._flow_cfg(), train)
        ckpt = "checkpoints/flow.safetensors"
        save_flow(self.path(ckpt), flow, seed=train.seed, config_hash=self.hash)
        payload = {"history": history, **self._flow_sanity(flow)}
        return {"checkpoints": [ckpt], "metrics": [self._metrics("train-flow", payload)]}

    @torch.no_grad()
    def _flow_sanity(self, flow, n: int = 32) -> dict:
        """Nearest-neighbour perceptual distance to training decodes: flow samples versus noise decodes."""
        ae = self.ae()
        lat = self._flow_latents()
        shape = (n, *lat.shape[1:])
        ref = ae.decode(lat[:128]).clamp(0, 1)
        samples = ae.decode(sample(flow, shape, seed=self.cfg["seed"])).clamp(0, 1)
        noise = ae.decode(torch.randn(shape, generator=torch.Generator().manual_seed(self.cfg["seed"] + 1))).clamp(0, 1)

        def nn_dist(imgs):
            best = []
            for im in imgs:
                best.append(float(perceptual_surrogate(im[None].expand_as(ref), ref).min()))
            return float(np.mean(best))

        return {"sample_nn_perceptual": nn_dist(samples), "noise_nn_perceptual": nn_dist(noise)}

    def _finetune_dual_sigma(self) -> dict:
        base = load_flow(self.path("checkpoints", "flow.safetensors"))
        ft = FinetuneConfig(**self.cfg["flow"]["finetune"])
        ft = replace(ft, seed=self._seed(ft.seed), lam=float(self.cfg["inpaint"]["lambda"]))
        model, history = finetune_dual_sigma(base, self._flow_latents(), ft, self.ae().f, self.size)
        ckpt = "checkpoints/flow_dual_sigma.safetensors"
        save_flow(self.path(ckpt), model, seed=ft.seed, rank=ft.rank, lam=ft.lam, config_hash=self.hash)
        return {"checkpoints": [ckpt], "metrics": [self._metrics("finetune-dual-sigma", {"history": history})]}

    def inpaint_set(self) -> tuple[np.ndarray, np.ndarray]:
        def build():
            p = self.cfg["inpaint"]
            n = int(p["n_eval"])
            images = self.heldout_images(n, 7)
            rng = np.random.default_rng(self.cfg["data"]["eval_seed"] + 7)
            fams = [MaskFamily.ELLIPSE, MaskFamily.POLYGON, MaskFamily.BRUSH]
            masks = np.stack([
                (generate_mask(int(rng.integers(2**31)), (self.size, self.size), fams[i % 3]).data >= 0.5).astype(np.float32)
                for i in range(n)
            ])
            self._verify("inpaint_set", array_hash(images, masks))
            return images, masks

        return self._memo("inpaint_set", build)

    def _eval_inpaint(self) -> dict:
        p = self.cfg["inpaint"]
        flows = {
            "base": load_flow(self.path("checkpoints", "flow.safetensors")),
            "dual_sigma": load_flow(self.path("checkpoints", "flow_dual_sigma.safetensors")),
        }
        images, masks = self.inpaint_set()
        table = evaluate_inpainting(
            self.ae(), flows, self.decformer(), images, masks,
            steps=int(p["steps"]), seed=int(p["seed"]) + self.cfg["seed"], lam=float(p["lambda"]),
            halo_px=int(p["seam_px"]), dataset_hash=array_hash(images, masks),
        )
        atomic_write_text(self.path("tables", "inpaint.csv"), table.to_csv())
        payload = {"rows": table.rows, "n": table.n, "dataset_hash": table.dataset_hash, "per_sample": table.per_sample}
        return {"metrics": [self._metrics("eval-inpaint", payload)], "artifacts": ["tables/inpaint.csv"]}

    def _train_colorop(self) -> dict:
        sec = self.cfg["colorop"]
        ae = self.ae()
        grid = (self.size // ae.f, self.size // ae.f)
        cfg = ColorOpConfig(**{**sec["model"], "latent_channels": ae.latent_channels, "grid": grid})
        cfg = replace(cfg, seed=self._seed(cfg.seed))
        train = ColorTrainConfig(**sec["train"])
        train = replace(train, seed=self._seed(train.seed))
        model, history = train_color_operator(ae, self.train_images(), cfg, train)
        ckpt = "checkpoints/colorop.safetensors"
        save_color_operator(self.path(ckpt), model, seed=train.seed, config_hash=self.hash)
        return {"checkpoints": [ckpt], "metrics": [self._metrics("train-colorop", {"history": history})]}

    def _eval_color(self) -> dict:
        ae = self.ae()
        model = load_color_operator(self.path("checkpoints", "colorop.safetensors"))
        images = self.heldout_images(int(self.cfg["color_eval"]["n_eval"]), 3)
        self._verify("color_set", array_hash(images))
        table = evaluate_color(ae, model, images, DEFAULT_GRID)
        sweep = evaluate_color(ae, model, images, [ColorParams(g, 1.0, 0.0) for g in GAMMA_SWEEP])
        with torch.no_grad():
            z = ae.encode(torch.from_numpy(images).float())
            res = model.residual(z, torch.zeros(3))
            identity_ratio = float(res.flatten(1).norm(dim=1).mean() / z.flatten(1).norm(dim=1).mean())
        atomic_write_text(self.path("tables", "color.csv"), table.to_csv())
        render_color_grid(ae, model, images, [ColorParams(1, 1, 0), ColorParams(2, 1, 0), ColorParams(0.5, 1.4, 0.1), ColorParams(3, 0.7, -0.1)], self.path("plots", "color_grid.png"))
        payload = {
            "summary": table.summary(),
            "per_setting": table.per_setting,
            "gamma_sweep": sweep.per_setting,
            "identity_residual_ratio": identity_ratio,
            "n": table.n,
        }
        return {"metrics": [self._metrics("eval-color", payload)], "artifacts": ["tables/color.csv", "plots/color_grid.png"]}
