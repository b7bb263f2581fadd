"""Segmentation of 3D voxel images with evolving triangulated surfaces.

Closed triangle meshes move under a curvature term plus a region-based
image force (piecewise-constant two-term energy).  Each step solves a
mass-lumped finite element system for the displacement, a uniform
background grid watches for imminent topology changes, and dedicated
mesh surgery handles splitting, merging and genus changes.
"""

from .voxels import VoxelGrid, load_raw, save_raw, make_phantom, world_to_voxel
from .mesh import SurfaceMesh, SurfaceSet, make_seed, export_obj, import_obj
from .regions import RegionState, init_regions, update_regions_incremental, nodal_force
from .fem import StepSystem, TimeStepControl, assemble, solve_step, solve_step_with_control
from .topology import DetectionParams, BackgroundGrid, TopoEvent, detect, classify, hungarian_match
from .quality import QualityParams, refine_pass, delete_pass
from .driver import RunConfig, RunReport, RunAborted, run, energy

__version__ = "0.1.0"
