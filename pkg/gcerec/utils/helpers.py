"""
工具函数模块
"""

import hashlib
import json
import os
import subprocess
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np
from pydantic import ValidationError

from gcerec.exceptions import ConfigError
from gcerec.models.schemas import RunConfig

SEED_STREAMS = ("init", "shuffle", "negatives", "dropout")
PACKAGE_VERSION = "0.1.0"


def parse_value(raw: str) -> Any:
    """值优先按 JSON 字面量解析 (数字、布尔、列表)，否则保留字符串"""
    raw = raw.strip()
    if not raw:
        return ""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """解析 "section.key = value" 行，构造嵌套字典"""
    result: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source} 第 {line_no} 行缺少 '=': {line}")
        key, value = line.split("=", 1)
        parts = [p.strip() for p in key.strip().split(".")]
        if not all(parts):
            raise ConfigError(f"{source} 第 {line_no} 行键名非法: {key.strip()}")
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{source} 第 {line_no} 行: {part} 已被赋值为标量")
            node = child
        if parts[-1] in node:
            raise ConfigError(f"{source} 第 {line_no} 行重复的键: {key.strip()}")
        node[parts[-1]] = parse_value(value)
    return result


def parse_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def _resolve_paths(data: Dict[str, Any], base: Path) -> None:
    # 数据路径相对于配置文件所在目录
    section = data.get("data")
    if not isinstance(section, dict):
        return
    if isinstance(section.get("path"), str) and not Path(section["path"]).is_absolute():
        section["path"] = str(base / section["path"])
    side_info = section.get("side_info")
    if isinstance(side_info, dict):
        side_info = [side_info]
        section["side_info"] = side_info
    for item in side_info or []:
        if isinstance(item, dict) and isinstance(item.get("path"), str) and not Path(item["path"]).is_absolute():
            item["path"] = str(base / item["path"])


def build_run_config(data: Dict[str, Any], source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors())
        raise ConfigError(f"{source} 配置无效: {problems}") from exc


def load_run_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    读取配置文件并校验
    GCE_OUTPUT_DIR 环境变量覆盖 output_dir；overrides 用点分键覆盖任意字段
    """
    path = Path(path)
    data = parse_config_file(path)
    _resolve_paths(data, path.parent)
    if os.getenv("GCE_OUTPUT_DIR"):
        data["output_dir"] = os.getenv("GCE_OUTPUT_DIR")
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return build_run_config(data, str(path))


def flatten_config(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_config(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def render_config(config: RunConfig) -> str:
    """RunConfig → "key = value" 文本，可被 parse_config_text 读回"""
    data = config.model_dump(mode="json", exclude_none=True)
    side_info = data.get("data", {}).pop("side_info", [])
    lines = [f"{key} = {json.dumps(value, ensure_ascii=False)}"
             for key, value in sorted(flatten_config(data).items())]
    if side_info:
        lines.append(f"data.side_info = {json.dumps(side_info, ensure_ascii=False)}")
    return "\n".join(lines) + "\n"


def seed_streams(seed: int, names: Iterable[str] = SEED_STREAMS) -> Dict[str, np.random.Generator]:
    """一个种子派生出互相独立的命名随机流"""
    names = list(names)
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def version_string() -> str:
    """类似 git describe 的版本号，不在仓库中时退回包版本"""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{PACKAGE_VERSION}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"{PACKAGE_VERSION}-unknown"


def fingerprint(payload: Any, paths: Iterable[Union[str, Path]] = ()) -> str:
    """sha256(配置片段 JSON + 各文件字节)"""
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8"))
    for path in paths:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()


def write_json(path: Union[str, Path], payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: Union[str, Path]) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def format_metric(value: float) -> str:
    return f"{value:.4f}"


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f} ± {std:.4f}"
