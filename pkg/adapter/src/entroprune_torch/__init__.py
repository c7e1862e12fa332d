"""PyTorch bridge for the entroprune channel-pruning toolkit."""

__version__ = "0.1.0"

from .export import export_model
from .importer import SpecNet, import_pruned
from .models import BasicBlock, build_lenet, build_resnet18, build_vgg16
from .recipes import RECIPES, accuracy, finetune

__all__ = [
    "export_model",
    "import_pruned",
    "SpecNet",
    "BasicBlock",
    "build_lenet",
    "build_vgg16",
    "build_resnet18",
    "RECIPES",
    "accuracy",
    "finetune",
]
