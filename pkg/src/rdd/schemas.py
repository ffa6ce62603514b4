"""JSON Schemas for the documents each CLI subcommand prints on stdout."""

_num = {"type": "number"}
_int = {"type": "integer", "minimum": 0}
_str_list = {"type": "array", "items": {"type": "string"}}

_class_counts = {
    "type": "object",
    "properties": {c: _int for c in ("D00", "D10", "D20", "D40")},
    "required": ["D00", "D10", "D20", "D40"],
}
_folder_stats = {
    "type": "object",
    "properties": {"images": _int, "usable": _int, "discarded_boxes": _int, "boxes": _class_counts},
    "required": ["images", "usable", "discarded_boxes", "boxes"],
}
_board = {
    "type": "object",
    "properties": {
        "map50": _num, "f1": _num, "precision": _num, "recall": _num,
        "tp": _int, "fp": _int, "fn": _int, "per_class": {"type": "object"},
    },
    "required": ["map50", "f1", "precision", "recall", "tp", "fp", "fn", "per_class"],
}

ERROR = {
    "type": "object",
    "properties": {"ok": {"const": False}, "error": {"type": "string"}, "type": {"type": "string"}},
    "required": ["ok", "error", "type"],
}

SCHEMAS = {
    "stats": {
        "type": "object",
        "properties": {
            "command": {"const": "stats"},
            "folders": {"type": "object", "additionalProperties": _folder_stats},
            "total": _folder_stats,
            "outputs": _str_list,
        },
        "required": ["command", "folders", "total", "outputs"],
    },
    "crop-norway": {
        "type": "object",
        "properties": {
            "command": {"const": "crop-norway"},
            "images": _int, "side": _int,
            "kept": _int, "clipped": _int, "dropped": _int, "total": _int,
            "out": {"type": "string"},
        },
        "required": ["command", "images", "side", "kept", "clipped", "dropped", "total", "out"],
    },
    "split": {
        "type": "object",
        "properties": {
            "command": {"const": "split"},
            "target_folder": {"type": "string"}, "seed": {"type": "integer"},
            "n_val": _int, "n_train": _int, "val_ids": _str_list, "train_ids": _str_list,
            "outputs": _str_list,
        },
        "required": ["command", "target_folder", "seed", "n_val", "n_train", "val_ids", "train_ids"],
    },
    "augment": {
        "type": "object",
        "properties": {
            "command": {"const": "augment preview"},
            "n": _int, "size": _int, "seed": {"type": "integer"},
            "config": {"type": "object"},
            "samples": {"type": "array", "items": {"type": "object",
                        "properties": {"index": _int, "boxes": _int, "ops": _str_list},
                        "required": ["index", "boxes", "ops"]}},
            "outputs": _str_list,
        },
        "required": ["command", "n", "size", "seed", "config", "samples", "outputs"],
    },
    "eval": {
        "type": "object",
        "properties": {
            "command": {"const": "eval"},
            "iou_threshold": _num, "conf_threshold": _num,
            "map50": _num, "f1": _num,
            "Overall": _board,
            "boards": {"type": "object", "additionalProperties": _board},
            "outputs": _str_list,
        },
        "required": ["command", "iou_threshold", "conf_threshold", "map50", "f1", "Overall"],
    },
    "ensemble": {
        "type": "object",
        "properties": {
            "command": {"const": "ensemble"},
            "mode": {"enum": ["wbf", "nms"]}, "iou_thr": _num,
            "sources": _str_list, "images": _int, "detections": _int,
            "provenance": {"type": "object"}, "out": {"type": ["string", "null"]},
        },
        "required": ["command", "mode", "iou_thr", "sources", "images", "detections"],
    },
    "ca-check": {
        "type": "object",
        "properties": {
            "command": {"const": "ca-check"},
            "pass": {"type": "boolean"}, "max_rel_err": _num, "shapes_ok": {"type": "boolean"},
            "seed": {"type": "integer"}, "n_instances": _int,
        },
        "required": ["command", "pass", "max_rel_err", "shapes_ok", "seed"],
    },
    "collect": {
        "type": "object",
        "properties": {
            "command": {"const": "collect"},
            "requests": _int, "fetched": _int, "cached": _int, "failed": _int, "dry_run": {"type": "boolean"},
            "records": {"type": "array", "items": {"type": "object"}},
        },
        "required": ["command", "requests", "fetched", "cached", "failed", "dry_run", "records"],
    },
}
