"""
检查点格式
"GCEC" | 版本字节 | 模型标签 | 张量记录 (名称长度, 名称, 行, 列, 小端 float64 行优先数据)
"""

import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from gcerec.core.heads import ScoringHead
from gcerec.exceptions import CheckpointError

MAGIC = b"GCEC"
VERSION = 1


def encode_checkpoint(tag: str, tensors: Dict[str, np.ndarray]) -> bytes:
    tag_bytes = tag.encode("utf-8")
    chunks = [MAGIC, struct.pack("<B", VERSION), struct.pack("<H", len(tag_bytes)), tag_bytes,
              struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        value = np.asarray(tensors[name], dtype="<f8")
        if value.ndim != 2:
            raise CheckpointError(f"张量 {name} 必须是二维矩阵，实际维度 {value.ndim}")
        name_bytes = name.encode("utf-8")
        chunks += [struct.pack("<H", len(name_bytes)), name_bytes,
                   struct.pack("<II", *value.shape), np.ascontiguousarray(value).tobytes()]
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Tuple[str, Dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("不是 GCEC 检查点文件")
    try:
        (version,) = struct.unpack_from("<B", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"检查点版本 {version} 与当前版本 {VERSION} 不一致")
        pos = 5
        (tag_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        tag = blob[pos:pos + tag_len].decode("utf-8")
        pos += tag_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(blob):
                raise CheckpointError(f"张量 {name} 数据被截断")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"检查点文件损坏: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("检查点末尾存在多余数据")
    return tag, tensors


def save_checkpoint(path: Union[str, Path], model: ScoringHead) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: p.value for name, p in model.named_parameters().items()}
    path.write_bytes(encode_checkpoint(model.tag, tensors))
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[str, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"检查点不存在: {path}")
    return decode_checkpoint(path.read_bytes())


def load_checkpoint(path: Union[str, Path], model: ScoringHead) -> ScoringHead:
    """把检查点参数写回模型；标签、名称、形状必须完全一致"""
    tag, tensors = read_checkpoint(path)
    if tag != model.tag:
        raise CheckpointError(f"检查点 {path} 的模型标签 {tag} 与配置 {model.tag} 不一致")
    params = model.named_parameters()
    if set(tensors) != set(params):
        missing = sorted(set(params) ^ set(tensors))
        raise CheckpointError(f"检查点 {path} 的张量集合不匹配: {missing}")
    for name, param in params.items():
        if tensors[name].shape != param.shape:
            raise CheckpointError(f"张量 {name} 形状 {tensors[name].shape} 与模型 {param.shape} 不一致")
        param.value[...] = tensors[name]
    return model
