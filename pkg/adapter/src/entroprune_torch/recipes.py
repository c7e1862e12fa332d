"""Training and fine-tuning recipes.

Schedules:
  lenet-train  Adam, lr 1e-3 halved every 7 epochs, 20 epochs
  lenet-ft     Adam, lr 1e-4 halved every 4 epochs, 10 epochs
  vgg-ft-10    SGD momentum 0.9, lr 1e-3, 10 epochs
  vgg-ft-50    SGD momentum 0.9, lr 1e-3, 50 epochs
  resnet-ft    SGD momentum 0.9, lr 1e-3, 20 epochs
"""

from __future__ import annotations

import torch
import torch.nn as nn

RECIPES = {
    "lenet-train": {"optimizer": "adam", "lr": 1e-3, "epochs": 20, "step": 7, "gamma": 0.5},
    "lenet-ft": {"optimizer": "adam", "lr": 1e-4, "epochs": 10, "step": 4, "gamma": 0.5},
    "vgg-ft-10": {"optimizer": "sgd", "lr": 1e-3, "momentum": 0.9, "epochs": 10},
    "vgg-ft-50": {"optimizer": "sgd", "lr": 1e-3, "momentum": 0.9, "epochs": 50},
    "resnet-ft": {"optimizer": "sgd", "lr": 1e-3, "momentum": 0.9, "epochs": 20},
}


@torch.no_grad()
def accuracy(model: nn.Module, loader, device="cpu") -> float:
    model.eval()
    hits = total = 0
    for images, labels in loader:
        logits = model(images.to(device))
        hits += int((logits.argmax(dim=1).cpu() == labels).sum())
        total += labels.shape[0]
    return hits / max(total, 1)


def finetune(model: nn.Module, recipe: str, train_loader, test_loader=None,
             epochs=None, device="cpu", log_fn=print):
    """Train `model` with the named recipe; returns (model, per-epoch log).

    `epochs=0` evaluates once and leaves the model untouched.
    """
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    spec = RECIPES[recipe]
    n_epochs = spec["epochs"] if epochs is None else int(epochs)
    model = model.to(device)
    log = []
    if n_epochs == 0:
        if test_loader is not None:
            log.append({"epoch": 0, "accuracy": accuracy(model, test_loader, device)})
        return model, log

    if spec["optimizer"] == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=spec["lr"])
    else:
        opt = torch.optim.SGD(model.parameters(), lr=spec["lr"],
                              momentum=spec.get("momentum", 0.0))
    sched = None
    if "step" in spec:
        sched = torch.optim.lr_scheduler.StepLR(opt, step_size=spec["step"],
                                                gamma=spec["gamma"])
    loss_fn = nn.CrossEntropyLoss()

    for epoch in range(1, n_epochs + 1):
        model.train()
        running = 0.0
        batches = 0
        for images, labels in train_loader:
            opt.zero_grad()
            loss = loss_fn(model(images.to(device)), labels.to(device))
            loss.backward()
            opt.step()
            running += float(loss.detach())
            batches += 1
        entry = {"epoch": epoch, "lr": opt.param_groups[0]["lr"],
                 "train_loss": running / max(batches, 1)}
        if sched is not None:
            sched.step()
        if test_loader is not None:
            entry["accuracy"] = accuracy(model, test_loader, device)
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return model, log


def mnist_loaders(root, download=False, batch_size=128):
    """MNIST train/test loaders; images scaled to [0, 1]."""
    from torch.utils.data import DataLoader
    from torchvision import datasets, transforms

    tf = transforms.ToTensor()
    try:
        train = datasets.MNIST(root, train=True, download=download, transform=tf)
        test = datasets.MNIST(root, train=False, download=download, transform=tf)
    except Exception as exc:
        raise RuntimeError(
            f"MNIST unavailable under {root!r} (pass download=True on a networked "
            f"machine): {exc}"
        ) from exc
    return (DataLoader(train, batch_size=batch_size, shuffle=True),
            DataLoader(test, batch_size=256))


def main(argv=None) -> int:
    import argparse

    from .importer import import_pruned
    from .models import build_lenet

    parser = argparse.ArgumentParser(description="fine-tune a (pruned) model")
    parser.add_argument("recipe", choices=sorted(RECIPES))
    parser.add_argument("--net-json", default=None,
                        help="pruned network to import (otherwise a fresh LeNet)")
    parser.add_argument("--state-dict", default=None)
    parser.add_argument("--data-root", default="./data")
    parser.add_argument("--download", action="store_true",
                        help="attempt to download the dataset if missing")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--save", default=None)
    args = parser.parse_args(argv)

    if args.net_json:
        model = import_pruned(args.net_json)
    else:
        model = build_lenet()
    if args.state_dict:
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
    train_loader, test_loader = mnist_loaders(args.data_root, download=args.download)
    model, log = finetune(model, args.recipe, train_loader, test_loader,
                          epochs=args.epochs)
    if log:
        print(f"final accuracy={log[-1].get('accuracy')}")
    if args.save:
        torch.save(model.state_dict(), args.save)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
