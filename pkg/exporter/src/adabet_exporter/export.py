"""Capture per-layer activations (and loss gradients) from torch models.

The output is a dump directory in the layout the adabet toolkit ingests:
``layer{i:04d}_batch{b:04d}.npy`` per trainable layer per batch, optional
``.grad.npy`` companions, and a ``meta.json`` array describing every
parameterized layer in execution order.  Layers are the leaf modules that
own parameters; parameter-free modules (dropout, pooling, flatten,
activations) are never listed.  When an activation module consumes a
layer's output directly, the dump holds the post-activation values.
"""

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

__all__ = ["ExportError", "ExportPlan", "export"]

_ACTIVATIONS = (
    nn.ReLU, nn.LeakyReLU, nn.ELU, nn.GELU, nn.SiLU, nn.Mish,
    nn.Tanh, nn.Sigmoid, nn.Softmax, nn.LogSoftmax, nn.Softplus,
    nn.Hardswish, nn.Hardsigmoid, nn.Hardtanh,
)


class ExportError(Exception):
    """A model, plan, or batch source that cannot be exported faithfully."""


@dataclass(eq=False)
class ExportPlan:
    """What to capture and how many batches to push through the model.

    batches must yield input tensors, or (inputs, labels) pairs when
    dump_grads is set.  group_rules pairs regex patterns with group ids;
    patterns are searched against qualified module names, first match wins.
    """

    model: nn.Module
    batches: object
    n_batches: int = 5
    batch_size: int = 8
    dump_grads: bool = False
    group_rules: tuple = ()


def _leaf_modules(model):
    for name, mod in model.named_modules():
        if next(mod.children(), None) is None:
            yield (name or "root"), mod


def _run_capture(model, x, grad_mode):
    """One forward pass recording every leaf-module call in execution order."""
    events = []
    handles = []
    for name, mod in _leaf_modules(model):
        def hook(_mod, inputs, output, name=name, mod=mod):
            events.append((name, mod, inputs, output))
        handles.append(mod.register_forward_hook(hook))
    try:
        if grad_mode:
            out = model(x)
        else:
            with torch.no_grad():
                out = model(x)
    finally:
        for h in handles:
            h.remove()
    return out, events


def _captured_activations(events):
    """Resolve each parameterized leaf call to its post-activation output.

    Starting from the module's raw output, follow any chain of activation
    modules that consume exactly that tensor, so the captured value is what
    the rest of the network actually sees.
    """
    rows = []
    seen = set()
    for k, (name, mod, _ins, out) in enumerate(events):
        if next(mod.parameters(recurse=False), None) is None:
            continue
        if id(mod) in seen:
            raise ExportError(
                "layer %s ran more than once in a single forward pass; "
                "weight-shared capture is unsupported" % name)
        seen.add(id(mod))
        if not isinstance(out, torch.Tensor):
            raise ExportError("layer %s output is not a tensor" % name)
        resolved = out
        for _jname, jmod, jins, jout in events[k + 1:]:
            if (isinstance(jmod, _ACTIVATIONS) and jins and jins[0] is resolved
                    and isinstance(jout, torch.Tensor)):
                resolved = jout
        rows.append((name, mod, resolved))
    return rows


def _layer_table(captured, rules, batch_size):
    table = []
    for name, mod, act in captured:
        if act.dim() < 1 or act.shape[0] != batch_size:
            raise ExportError(
                "layer %s output has leading dimension %s, expected the "
                "batch size %d" % (name, tuple(act.shape[:1]), batch_size))
        elems = 1
        for s in act.shape[1:]:
            elems *= int(s)
        if elems < 1:
            raise ExportError("layer %s produces empty activations" % name)
        group_id = None
        for pattern, gid in rules:
            if pattern.search(name):
                group_id = gid
                break
        table.append({
            "name": name,
            "module": mod,
            "trainable": any(p.requires_grad for p in mod.parameters(recurse=False)),
            "param_count": int(sum(p.numel() for p in mod.parameters(recurse=False))),
            "shape": tuple(int(s) for s in act.shape[1:]),
            "elems": elems,
            "group_id": group_id,
        })
    return table


def _check_batch_layers(table, captured, b, batch_size):
    if len(captured) != len(table):
        raise ExportError(
            "batch %d executed %d parameterized layers, batch 0 executed %d"
            % (b, len(captured), len(table)))
    for row, (name, mod, act) in zip(table, captured):
        if mod is not row["module"] or name != row["name"]:
            raise ExportError(
                "batch %d executed a different layer order (saw %s, expected %s)"
                % (b, name, row["name"]))
        if act.dim() < 1 or act.shape[0] != batch_size:
            raise ExportError(
                "layer %s batch %d output has leading dimension %s, expected "
                "the batch size %d" % (name, b, tuple(act.shape[:1]), batch_size))
        if tuple(int(s) for s in act.shape[1:]) != row["shape"]:
            raise ExportError(
                "layer %s activation shape drifted: batch 0 gave %s, batch %d "
                "gives %s" % (name, row["shape"], b, tuple(act.shape[1:])))


def _split_batch(item, dump_grads, b):
    if isinstance(item, (tuple, list)):
        if len(item) != 2:
            raise ExportError(
                "batch %d: expected a tensor or an (inputs, labels) pair" % b)
        x, labels = item
    else:
        x, labels = item, None
    if not isinstance(x, torch.Tensor):
        raise ExportError("batch %d: inputs must be a torch tensor" % b)
    if dump_grads and labels is None:
        raise ExportError(
            "gradient capture needs (inputs, labels) batches; batch %d has "
            "no labels" % b)
    return x, labels


def _batch_gradients(model_out, labels, captured, batch_size, b):
    """One backward pass; returns the loss gradient at each captured tensor.

    The loss is mean cross-entropy of the model output against the integer
    labels.  Captured tensors unreachable from the loss get zero gradients.
    """
    if not isinstance(model_out, torch.Tensor) or model_out.dim() != 2:
        raise ExportError(
            "gradient capture needs a (batch, classes) model output")
    if not isinstance(labels, torch.Tensor) or labels.dim() != 1 \
            or labels.shape[0] != batch_size:
        raise ExportError("batch %d labels must have shape (%d,)" % (b, batch_size))
    if labels.dtype != torch.long:
        raise ExportError("batch %d labels must be int64 class indices" % b)
    if int(labels.min()) < 0 or int(labels.max()) >= model_out.shape[1]:
        raise ExportError(
            "batch %d labels fall outside the model's %d classes"
            % (b, model_out.shape[1]))
    for name, _mod, act in captured:
        if not act.requires_grad:
            raise ExportError(
                "layer %s is detached from the autograd graph; cannot capture "
                "its gradient" % name)
        act.retain_grad()
    loss = torch.nn.functional.cross_entropy(model_out, labels)
    loss.backward()
    return [act.grad if act.grad is not None else torch.zeros_like(act)
            for _name, _mod, act in captured]


def _dump_array(path, tensor, layer_name, b, kind):
    if tensor.dtype not in (torch.float32, torch.float64):
        raise ExportError(
            "layer %s batch %d: %s dtype %s is unsupported; convert the model "
            "to float32 or float64" % (layer_name, b, kind, tensor.dtype))
    arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
    if not np.isfinite(arr).all():
        raise ExportError(
            "layer %s batch %d produced non-finite %s" % (layer_name, b, kind))
    np.save(path, arr)


def _meta_json(table):
    rows = []
    for i, row in enumerate(table):
        rows.append({
            "index": i,
            "name": row["name"],
            "trainable": row["trainable"],
            "param_count": row["param_count"],
            "act_elems_per_sample": row["elems"],
            "group_id": row["group_id"],
        })
    return json.dumps(rows, separators=(", ", ": ")) + "\n"


def _compile_rules(group_rules):
    rules = []
    for k, rule in enumerate(group_rules):
        try:
            pattern, gid = rule
        except (TypeError, ValueError):
            raise ExportError(
                "group rule %d must be a (pattern, group_id) pair" % k) from None
        if not isinstance(gid, str) or not gid:
            raise ExportError(
                "group rule %d: group id must be a non-empty string" % k)
        try:
            rules.append((re.compile(pattern), gid))
        except re.error as exc:
            raise ExportError(
                "group rule %d: bad pattern %r: %s" % (k, pattern, exc)) from None
    return rules


def export(plan, out_dir):
    """Run the plan and write a dump directory; returns its path.

    Writes ``layer####_batch####.npy`` for every trainable layer and batch,
    ``.grad.npy`` companions when the plan asks for gradients, and a
    ``meta.json`` listing every parameterized layer in execution order.
    The model is switched to eval mode for the duration and its mode flags
    restored afterwards; parameter ``.grad`` fields are cleared whenever
    gradients are captured.
    """
    if not isinstance(plan.model, nn.Module):
        raise ExportError("plan.model must be a torch module")
    if plan.n_batches < 1:
        raise ExportError("n_batches must be >= 1, got %r" % (plan.n_batches,))
    if plan.batch_size < 1:
        raise ExportError("batch_size must be >= 1, got %r" % (plan.batch_size,))
    rules = _compile_rules(plan.group_rules)

    out = Path(out_dir)
    if out.exists():
        if not out.is_dir():
            raise ExportError("%s exists and is not a directory" % out)
        if any(out.iterdir()):
            raise ExportError("refusing to export into non-empty directory %s" % out)
    out.mkdir(parents=True, exist_ok=True)

    model = plan.model
    mode_flags = [(m, m.training) for m in model.modules()]
    model.eval()
    try:
        table = None
        source = iter(plan.batches)
        for b in range(plan.n_batches):
            try:
                item = next(source)
            except StopIteration:
                raise ExportError(
                    "batch source ran dry after %d of %d batches"
                    % (b, plan.n_batches)) from None
            x, labels = _split_batch(item, plan.dump_grads, b)
            if x.dim() < 1 or x.shape[0] != plan.batch_size:
                raise ExportError(
                    "batch %d has leading dimension %s, plan says batch_size %d"
                    % (b, tuple(x.shape[:1]), plan.batch_size))
            if plan.dump_grads:
                if not x.dtype.is_floating_point:
                    raise ExportError(
                        "gradient capture needs floating-point inputs")
                x = x.detach().clone().requires_grad_(True)
                model_out, events = _run_capture(model, x, grad_mode=True)
            else:
                model_out, events = _run_capture(model, x, grad_mode=False)
            captured = _captured_activations(events)
            if b == 0:
                table = _layer_table(captured, rules, plan.batch_size)
                if not table:
                    raise ExportError("model has no parameterized layers to export")
                if not any(row["trainable"] for row in table):
                    raise ExportError("model has no trainable layers to export")
            else:
                _check_batch_layers(table, captured, b, plan.batch_size)
            grads = None
            if plan.dump_grads:
                grads = _batch_gradients(
                    model_out, labels, captured, plan.batch_size, b)
                model.zero_grad(set_to_none=True)
            for i, (row, (_name, _mod, act)) in enumerate(zip(table, captured)):
                if not row["trainable"]:
                    continue
                _dump_array(out / ("layer%04d_batch%04d.npy" % (i, b)),
                            act, row["name"], b, "activations")
                if grads is not None:
                    _dump_array(out / ("layer%04d_batch%04d.grad.npy" % (i, b)),
                                grads[i], row["name"], b, "gradients")
    finally:
        for m, flag in mode_flags:
            m.train(flag)
    (out / "meta.json").write_text(_meta_json(table))
    return out
