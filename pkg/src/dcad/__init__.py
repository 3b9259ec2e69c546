"""Bidirectional editing for differentiable CAD programs.

Programs in a small textual CAD language evaluate to meshes plus a
differentiable computation graph; direct geometric edits are resolved back
into program-parameter updates by constrained optimization over a family of
energy objectives, producing a gallery of candidate solutions.
"""

from .autodiff import Graph, NumericError, Tape, eval_graph, eval_tape, jacobian, jvp, lower, vjp
from .dsl import Diagnostic, Program, SyntaxTreeError, parse, pretty_print, validate
from .interp import InterpError, InterpResult, interpret, op_catalog
from .mesh import MeshTopology, build_deformation_data, geodesic_distances, signed_volume
from .objectives import EditSpec, ObjectiveConfig, compute_weights
from .optimize import NLPProblem, OptResult, check_kkt, minimize
from .pipeline import CompiledModel, compile_file, compile_text, load_bundled
from .sync import OptionGallery, apply_option, project_then_fit_baseline, synchronize

__version__ = "0.1.0"
