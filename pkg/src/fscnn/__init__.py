"""Resolution-independent CNNs on piecewise-constant grids."""

from .grid import GridFunction, GridSpec, RectDomain, project_pc, refine, resolution_ladder, sup_diff
from .network import LayerSpec, NetworkConfig, Params, forward, init_params, instantiate_at_resolution

__version__ = "0.1.0"
