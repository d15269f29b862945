"""File formats: COLMAP text, PLY, PNG and the compact model format."""

from .colmap import SfmBundle, bundle_from_cameras, parse_colmap_text, write_colmap_text
from .compact import load_compact, save_compact
from .images import read_png, write_png
from .ply import read_gaussians_ply, read_ply, write_gaussians_ply, write_points_ply
