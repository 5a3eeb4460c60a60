"""Markup-document pre-training: DOM paths, pre-training objectives, fine-tuning and metrics."""

from .dom import DomTree, NodeRelation, XPathExpr, clean_tree, node_relation, parse_html, xpath_of
from .features import TagVocab, TextVocab, encode_example, encode_xpath, tokenize_page
from .model import MarkupModel, ModelConfig
from .train import OptimConfig, adamw_step, lr_at

__version__ = "0.1.0"

__all__ = [
    "DomTree",
    "MarkupModel",
    "ModelConfig",
    "NodeRelation",
    "OptimConfig",
    "TagVocab",
    "TextVocab",
    "XPathExpr",
    "adamw_step",
    "clean_tree",
    "encode_example",
    "encode_xpath",
    "lr_at",
    "node_relation",
    "parse_html",
    "tokenize_page",
    "xpath_of",
]
