"""Packet-sampling simulation and sampled flow-size inversion."""

from .model import DiscretePmf, FlowSizeModel, ParetoSegment, draw_flow_sizes, model_ccdf, model_pmf

__all__ = ["DiscretePmf", "FlowSizeModel", "ParetoSegment", "draw_flow_sizes", "model_ccdf", "model_pmf"]
