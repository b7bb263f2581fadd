"""The segmentation loop: regions, solve, move, topology, mesh quality.

Each step recomputes the region means near the surfaces, assembles and
solves the displacement system under the adaptive step-size control,
moves the vertices, lets the background grid look for topology changes,
and finally refines or cleans the triangulations.  The run stops at the
step budget or after a configurable number of consecutive quiet steps.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .fem import (
    TimeStepControl,
    assemble,
    normal_displacement,
    solve_step,
    solve_step_with_control,
)
from .mesh import SurfaceSet, check_mesh, enclosed_volume_and_area
from .quality import QualityParams, delete_pass, refine_pass
from .regions import init_regions, nodal_force, update_regions_incremental
from .topology import DetectionParams, run_topology_pass

logger = logging.getLogger(__name__)


class RunAborted(Exception):
    """A module failed mid-run; carries the last consistent state."""

    def __init__(self, cause, surfaces, report):
        super().__init__(str(cause))
        self.cause = cause
        self.surfaces = surfaces
        self.report = report


@dataclass
class RunConfig:
    sigma: float
    lam: float
    tau0: float
    control: TimeStepControl
    detection: DetectionParams
    quality: QualityParams = None
    band_width: int = 3
    max_steps: int = 500
    stop_eps: float = None        # defaults to control.dxn_min
    stop_consecutive: int = 10
    solver: str = "cg"

    def __post_init__(self):
        if self.sigma <= 0 or self.lam < 0 or self.tau0 <= 0 or self.max_steps < 0:
            raise ValueError("need sigma > 0, lam >= 0, tau0 > 0, max_steps >= 0")
        if self.stop_eps is None:
            self.stop_eps = self.control.dxn_min


@dataclass
class RunReport:
    steps: int = 0
    stop_reason: str = ""
    tau_history: list = field(default_factory=list)
    dxn_history: list = field(default_factory=list)
    energy_history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    final_surfaces: list = field(default_factory=list)

    def to_dict(self):
        return {
            "steps": self.steps,
            "stop_reason": self.stop_reason,
            "tau_history": self.tau_history,
            "dxn_history": self.dxn_history,
            "energy_history": self.energy_history,
            "events": self.events,
            "warnings": self.warnings,
            "final_surfaces": self.final_surfaces,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def energy(grid, state, surfaces, sigma, lam):
    """Weighted surface area plus the per-region squared intensity misfit."""
    area = sum(float(m.face_areas().sum()) for m in surfaces.meshes)
    fidelity = 0.0
    for k in range(1, state.n_regions + 1):
        if state.counts[k] > 0:
            mean = state.sums[k] / state.counts[k]
            fidelity += float(state.sums_sq[k] - state.counts[k] * mean * mean)
    return sigma * area + lam * fidelity * grid.voxel_volume


def surface_metrics(surfaces):
    out = []
    for mesh in surfaces.meshes:
        rep = check_mesh(mesh)
        entry = {
            "surface_id": mesh.surface_id,
            "n_vertices": mesh.n_vertices,
            "n_faces": mesh.n_faces,
            "closed": rep["closed"],
            "euler": rep["euler"],
            "genus": rep["genus"],
        }
        if rep["closed"]:
            volume, area = enclosed_volume_and_area(mesh)
            entry["area"] = area
            entry["volume"] = volume
        out.append(entry)
    return out


def _clamp_to_box(surfaces, lo, hi):
    clamped = 0
    for mesh in surfaces.meshes:
        v = mesh.vertices
        c = np.clip(v, lo, hi)
        n = int(np.sum(np.any(c != v, axis=1)))
        if n:
            mesh.vertices = c
            clamped += n
    return clamped


def run(grid, seed_surfaces, config):
    """Evolve the seed surfaces in the image until quiet or out of steps.

    Returns (surfaces, report).  A numerical or topological failure raises
    RunAborted carrying the last consistent surfaces and partial report.
    """
    surfaces = seed_surfaces.copy()
    report = RunReport()
    lo, hi = grid.box
    tau = config.tau0
    state = None
    quiet = 0
    last_energy = None
    last_step_had_event = False

    try:
        for step in range(config.max_steps):
            if state is None:
                state = init_regions(grid, surfaces)
            else:
                state = update_regions_incremental(
                    state, grid, surfaces, band_width=config.band_width
                )
                if state.full_rebuild:
                    report.warnings.append("step %d: region band fallback" % step)

            e = energy(grid, state, surfaces, config.sigma, config.lam)
            if (
                last_energy is not None
                and not last_step_had_event
                and e > last_energy + 1e-3 * abs(last_energy)
            ):
                msg = "step %d: energy rose from %.6g to %.6g" % (step, last_energy, e)
                logger.warning(msg)
                report.warnings.append(msg)
            last_energy = e
            report.energy_history.append(e)

            force = nodal_force(grid, state, surfaces, config.lam)
            system = assemble(surfaces, force, config.sigma, tau)
            positions = surfaces.all_vertices()

            def solve_at(t):
                trial = system.with_tau(t)
                delta, kappa, _ = solve_step(trial, positions, method=config.solver)
                return delta, kappa, normal_displacement(delta, system.omega)

            delta, kappa, tau, _ = solve_step_with_control(solve_at, tau, config.control)
            dxn = normal_displacement(delta, system.omega)
            report.tau_history.append(tau)
            report.dxn_history.append(dxn)

            offsets = surfaces.vertex_offsets()
            for i, mesh in enumerate(surfaces.meshes):
                mesh.vertices = mesh.vertices + delta[offsets[i]:offsets[i + 1]]
            clamped = _clamp_to_box(surfaces, lo, hi)
            if clamped:
                msg = "step %d: clamped %d vertices into the image box" % (step, clamped)
                logger.warning(msg)
                report.warnings.append(msg)

            surfaces, event_records = run_topology_pass(surfaces, config.detection, (lo, hi))
            last_step_had_event = bool(event_records)
            for rec in event_records:
                report.events.append({
                    "step": step,
                    "kind": rec.kind,
                    "cube": rec.cube,
                    "n_nodes": rec.n_nodes,
                    "chi_before": rec.chi_before,
                    "chi_after": rec.chi_after,
                })
            if event_records:
                # fresh caps move fast; damp the next step and relabel fully
                tau = max(tau / config.control.lam_t, config.control.tau_min)
                state = None

            if config.quality is not None:
                touched = False
                meshes = []
                for mesh in surfaces.meshes:
                    refined, n_ref = refine_pass(mesh, config.quality)
                    cleaned, n_del, _ = delete_pass(refined, config.quality)
                    touched |= bool(n_ref or n_del)
                    meshes.append(cleaned)
                if touched:
                    surfaces = SurfaceSet(
                        meshes, list(surfaces.region_topology), surfaces.n_regions
                    )

            report.steps = step + 1
            if dxn < config.stop_eps and not event_records:
                quiet += 1
                if quiet >= config.stop_consecutive:
                    report.stop_reason = "quiet for %d steps" % quiet
                    break
            else:
                quiet = 0
        else:
            report.stop_reason = "max steps reached" if config.max_steps else "no steps requested"
    except Exception as exc:  # noqa: BLE001 - attach state per the driver contract
        report.stop_reason = "aborted: %s" % exc
        report.final_surfaces = surface_metrics(surfaces)
        raise RunAborted(exc, surfaces, report) from exc

    report.final_surfaces = surface_metrics(surfaces)
    return surfaces, report
