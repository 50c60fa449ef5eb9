#!/usr/bin/env python3
"""
rbfsnt MCP Server - model inspection and attack detection tools

This is a Model Context Protocol (MCP) server that exposes a trained rbfsnt
checkpoint to AI assistants or direct HTTP clients. It supports both stdio and
HTTP modes.

Tools:
- get_model_info:     architecture, head, metric and kernel of the loaded model
- classify_sample:    prediction, class probabilities and the clusters behind it
- similar_samples:    most similar / dissimilar corpus items under the learned metric
- explain_sample:     guided-backprop feature response and its average local entropy
- attack_and_detect:  attack one sample and score clean vs adversarial entropy
- get_usage_stats:    per-tool call counts

Configuration (environment):
- RBFSNT_CHECKPOINT:      checkpoint to serve (required before the first model tool call)
- RBFSNT_CORPUS_IMAGES / RBFSNT_CORPUS_LABELS: IDX files used for sample_index and retrieval
- PORT:                   HTTP port (default 8080)

Usage:
- Stdio mode: python src/mcp_stdio_server.py
- HTTP mode:  python src/mcp_stdio_server.py --http
"""

import asyncio
import json
import logging
import os
import sys
import threading
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np
import uvicorn
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from pydantic import ValidationError

from adversarial import AttackConfig, run_attack
from checkpoint import checkpoint_load
from datasets import Dataset, load_idx
from errors import JSONRPC_INVALID_PARAMS, JSONRPC_INTERNAL, DataError, RbfsntError, UsageError
from explain_detect import detect, guided_backprop
from model import Classifier
from rbf_head import similarity_query, top_clusters
from settings import (
    APP_NAME,
    CHECKPOINT_ENV,
    CORPUS_IMAGES_ENV,
    CORPUS_LABELS_ENV,
    DEFAULT_PORT,
    VERSION,
    configure_logging,
)

logger = logging.getLogger(__name__)

# ============================================================================
# CONFIGURATION & CONSTANTS
# ============================================================================

PROTOCOL_VERSION = "2024-11-05"
MAX_TOP_N = 50
JSONRPC_METHOD_NOT_FOUND = -32601

# Tool usage tracking
tool_usage = {
    "total_calls": 0,
    "by_tool": {},
    "errors": 0,
    "start_time": datetime.now(),
}

# ============================================================================
# UTILITY FUNCTIONS
# ============================================================================

def log_tool_usage(tool: str, ok: bool = True) -> None:
    """Count one tool call."""
    tool_usage["total_calls"] += 1
    tool_usage["by_tool"][tool] = tool_usage["by_tool"].get(tool, 0) + 1
    if not ok:
        tool_usage["errors"] += 1
    logger.info(f"Tool usage: {tool} | ok: {ok} | total: {tool_usage['total_calls']}")


def validate_top_n(top_n, max_allowed: int = MAX_TOP_N) -> int:
    """Validate and cap a top_n argument (clients may pass strings)."""
    try:
        top_n = int(top_n)
    except (TypeError, ValueError):
        raise UsageError(f"top_n must be an integer, got {top_n!r}")
    if top_n < 1:
        raise UsageError("top_n must be >= 1")
    if top_n > max_allowed:
        logger.warning(f"top_n {top_n} exceeds maximum {max_allowed}, using {max_allowed}")
        return max_allowed
    return top_n


class ModelState:
    """Lazily loaded model and optional corpus, shared by all tool calls (read-only after load)."""

    def __init__(self, model: Optional[Classifier] = None, corpus: Optional[Dataset] = None):
        self._model = model
        self._corpus = corpus
        self._corpus_embeddings: Optional[np.ndarray] = None
        self._lock = threading.Lock()

    @property
    def model(self) -> Classifier:
        with self._lock:
            if self._model is None:
                path = os.environ.get(CHECKPOINT_ENV)
                if not path:
                    raise UsageError(f"no model loaded; set {CHECKPOINT_ENV} to a checkpoint path")
                self._model = checkpoint_load(path)
            return self._model

    @property
    def corpus(self) -> Dataset:
        with self._lock:
            if self._corpus is None:
                images, labels = os.environ.get(CORPUS_IMAGES_ENV), os.environ.get(CORPUS_LABELS_ENV)
                if not images or not labels:
                    raise UsageError(f"no corpus configured; set {CORPUS_IMAGES_ENV} and {CORPUS_LABELS_ENV}")
                self._corpus = load_idx(images, labels, "test")
            return self._corpus

    def corpus_embeddings(self) -> np.ndarray:
        corpus, model = self.corpus, self.model
        with self._lock:
            if self._corpus_embeddings is None:
                self._corpus_embeddings = model.embed(corpus.images)
            return self._corpus_embeddings

    def image(self, arguments: Dict[str, Any]) -> np.ndarray:
        """Image from `pixels` (any nesting, values in [0,1]) or from corpus `sample_index`."""
        shape = tuple(self.model.config.input_shape)
        if arguments.get("pixels") is not None:
            pixels = np.asarray(arguments["pixels"], dtype=np.float64)
            if pixels.size != int(np.prod(shape)):
                raise DataError(f"expected {int(np.prod(shape))} pixel values for input {shape}, got {pixels.size}")
            pixels = pixels.reshape(shape)
            if pixels.min() < 0 or pixels.max() > 1:
                raise DataError("pixel values must lie in [0, 1]")
            return pixels
        if arguments.get("sample_index") is not None:
            index = int(arguments["sample_index"])
            if not 0 <= index < len(self.corpus):
                raise UsageError(f"sample_index must be in [0, {len(self.corpus)})")
            return self.corpus.images[index]
        raise UsageError("pass either pixels or sample_index")

    def label(self, arguments: Dict[str, Any], image: np.ndarray) -> int:
        if arguments.get("label") is not None:
            return int(arguments["label"])
        if arguments.get("sample_index") is not None and arguments.get("pixels") is None:
            return int(self.corpus.labels[int(arguments["sample_index"])])
        return int(self.model.predict(image[None])[0])


SAMPLE_PROPERTIES = {
    "pixels": {
        "type": "array",
        "description": "Image values in [0,1], flattened or nested, matching the model input shape",
        "items": {},
    },
    "sample_index": {
        "type": "integer",
        "description": "Index into the configured corpus (alternative to pixels)",
    },
}


class MCPServer:
    def __init__(self, state: Optional[ModelState] = None):
        self.state = state or ModelState()
        self.tools = [
            {
                "name": "get_model_info",
                "description": "Describe the loaded model: backbone, head, clusters, metric and kernel.",
                "inputSchema": {"type": "object", "properties": {}, "required": []},
            },
            {
                "name": "classify_sample",
                "description": "Classify one image and list the RBF clusters behind its ground-truth (or predicted) class and the runner-up class.",
                "inputSchema": {
                    "type": "object",
                    "properties": {
                        **SAMPLE_PROPERTIES,
                        "top_k": {"type": "integer", "description": "Clusters to list", "default": 3},
                    },
                    "required": [],
                },
            },
            {
                "name": "similar_samples",
                "description": "Most similar and most dissimilar corpus samples under the learned distance metric.",
                "inputSchema": {
                    "type": "object",
                    "properties": {
                        **SAMPLE_PROPERTIES,
                        "top_n": {"type": "integer", "description": "Results per list (max 50)", "default": 5},
                    },
                    "required": [],
                },
            },
            {
                "name": "explain_sample",
                "description": "Guided-backpropagation feature response of one image and its average local entropy.",
                "inputSchema": {
                    "type": "object",
                    "properties": {
                        **SAMPLE_PROPERTIES,
                        "strategy": {
                            "type": "string",
                            "description": "Entropy histogram: intensity or cooccurrence",
                            "default": "intensity",
                        },
                        "tau": {"type": "number", "description": "Optional detector threshold to apply"},
                    },
                    "required": [],
                },
            },
            {
                "name": "attack_and_detect",
                "description": "Attack one image (fgsm, gradient or deepfool) and compare clean vs adversarial entropy scores.",
                "inputSchema": {
                    "type": "object",
                    "properties": {
                        **SAMPLE_PROPERTIES,
                        "label": {"type": "integer", "description": "Ground truth (defaults to corpus label or prediction)"},
                        "attack": {"type": "string", "description": "fgsm, gradient or deepfool", "default": "fgsm"},
                        "epsilon": {"type": "number", "description": "FGSM budget", "default": 0.25},
                        "step": {"type": "number", "description": "Gradient attack step", "default": 1.0},
                        "tau": {"type": "number", "description": "Optional detector threshold"},
                    },
                    "required": [],
                },
            },
            {
                "name": "get_usage_stats",
                "description": "Get call statistics for all tools.",
                "inputSchema": {"type": "object", "properties": {}, "required": []},
            },
        ]

    def call_tool(self, tool_name: str, arguments: Dict[str, Any]) -> Optional[str]:
        """Run a tool synchronously; None for an unknown tool."""
        if tool_name == "get_model_info":
            return get_model_info(self.state)
        elif tool_name == "classify_sample":
            return classify_sample(self.state, **arguments)
        elif tool_name == "similar_samples":
            return similar_samples(self.state, **arguments)
        elif tool_name == "explain_sample":
            return explain_sample(self.state, **arguments)
        elif tool_name == "attack_and_detect":
            return attack_and_detect(self.state, **arguments)
        elif tool_name == "get_usage_stats":
            return get_usage_stats()
        return None

    async def handle_message(self, message: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        """Handle MCP protocol messages - used by both stdio and HTTP modes."""
        method = message.get("method")
        message_id = message.get("id")
        logger.info(f"Handling method: {method} (id: {message_id})")

        # Notifications (no id) get no response
        if message_id is None and method in ["notifications/initialized"]:
            logger.info(f"Notification received for {method}, not sending response")
            return None

        try:
            if method == "initialize":
                return {
                    "jsonrpc": "2.0",
                    "id": message_id,
                    "result": {
                        "protocolVersion": PROTOCOL_VERSION,
                        "capabilities": {"tools": {"listChanged": False}, "resources": {}, "prompts": {}},
                        "serverInfo": {"name": APP_NAME, "version": VERSION},
                    },
                }

            elif method == "tools/list":
                return {"jsonrpc": "2.0", "id": message_id, "result": {"tools": self.tools}}

            elif method == "resources/list":
                resources = [
                    {
                        "uri": "resource://usage-stats",
                        "name": "Tool Usage Statistics",
                        "description": "Per-tool call counts since start",
                        "mimeType": "application/json",
                    },
                    {
                        "uri": "resource://model-info",
                        "name": "Model Information",
                        "description": "Configuration of the served checkpoint",
                        "mimeType": "application/json",
                    },
                ]
                return {"jsonrpc": "2.0", "id": message_id, "result": {"resources": resources}}

            elif method == "prompts/list":
                return {"jsonrpc": "2.0", "id": message_id, "result": {"prompts": []}}

            elif method == "tools/call":
                tool_name = message.get("params", {}).get("name")
                arguments = message.get("params", {}).get("arguments", {}) or {}
                logger.info(f"Calling tool: {tool_name} with args: {sorted(arguments)}")

                if tool_name not in {tool["name"] for tool in self.tools}:
                    return {
                        "jsonrpc": "2.0",
                        "id": message_id,
                        "error": {"code": JSONRPC_METHOD_NOT_FOUND, "message": f"Unknown tool: {tool_name}"},
                    }
                try:
                    result = await asyncio.to_thread(self.call_tool, tool_name, arguments)
                except Exception:
                    log_tool_usage(tool_name, ok=False)
                    raise
                log_tool_usage(tool_name)
                return {
                    "jsonrpc": "2.0",
                    "id": message_id,
                    "result": {"content": [{"type": "text", "text": str(result)}]},
                }

            return {
                "jsonrpc": "2.0",
                "id": message_id,
                "error": {"code": JSONRPC_METHOD_NOT_FOUND, "message": f"Unknown method: {method}"},
            }

        except RbfsntError as e:
            logger.warning(f"Tool error ({e.kind}): {e}")
            return _error(message_id, e.jsonrpc_code, f"{e.kind}: {e}")
        except (TypeError, ValidationError) as e:
            # unexpected or invalid arguments from the client
            logger.warning(f"Bad tool arguments: {e}")
            return _error(message_id, JSONRPC_INVALID_PARAMS, f"Invalid params: {e}")
        except Exception as e:
            logger.error(f"Error handling message: {e}")
            return _error(message_id, JSONRPC_INTERNAL, f"Internal error: {e}")


def _error(message_id, code: int, text: str) -> Optional[Dict[str, Any]]:
    if message_id is None:
        return None
    return {"jsonrpc": "2.0", "id": message_id, "error": {"code": code, "message": text}}


# ============================================================================
# TOOL IMPLEMENTATIONS
# ============================================================================

def get_model_info(state: ModelState) -> str:
    model = state.model
    config = model.config
    n_params = sum(p.data.size for p in model.named_parameters().values())
    info = f"""🧠 **Model**

• Backbone: {config.arch} ({len(model.backbone.layers)} layers, input {tuple(config.input_shape)})
• Head: {config.head}
• Classes: {config.num_classes}
• Parameters: {n_params:,}
• Precision: {config.precision}"""
    if model.head is not None:
        info += f"""
• Clusters: {model.head.num_clusters} (embedding dim {model.head.dim})
• Metric: {model.head.metric_mode}
• Kernel: {model.head.kernel.kind}, sigma {', '.join(f'{s:.4g}' for s in model.head.sigma.data)}"""
    return info


def classify_sample(state: ModelState, pixels=None, sample_index=None, top_k: int = 3) -> str:
    model = state.model
    image = state.image({"pixels": pixels, "sample_index": sample_index})
    probs = model.probabilities(image[None])[0]
    predicted = int(np.argmax(probs))
    order = np.argsort(-probs, kind="stable")[:3]

    result = f"🔢 **Prediction: class {predicted}** (confidence {probs[predicted]:.4f})\n\n📈 **Top classes**"
    for k in order:
        result += f"\n• class {int(k)}: {probs[k]:.4f}"
    if model.head is not None:
        embedding = model.embed(image[None])[0]
        top_k = validate_top_n(top_k, model.head.num_clusters)
        # ground truth when the sample comes from the corpus, otherwise the prediction
        reference = state.label({"pixels": pixels, "sample_index": sample_index}, image)
        source = "ground truth" if pixels is None and sample_index is not None else "predicted"
        runner_up = next(int(k) for k in np.argsort(-probs, kind="stable") if k != reference)
        for title, k in ((f"🎯 **Clusters behind class {reference}** ({source})", reference),
                         (f"🥈 **Clusters behind runner-up class {runner_up}** ({probs[runner_up]:.4f})", runner_up)):
            result += f"\n\n{title}"
            for entry in top_clusters(model.head, embedding, top_k, k):
                result += (f"\n• cluster {entry['cluster']}: contribution {entry['contribution']:+.4f}, "
                           f"distance² {entry['distance_sq']:.4f}")
    return result


def similar_samples(state: ModelState, pixels=None, sample_index=None, top_n: int = 5) -> str:
    model = state.model
    if model.head is None:
        raise UsageError("similarity retrieval needs a model with an RBF head")
    image = state.image({"pixels": pixels, "sample_index": sample_index})
    corpus = state.corpus
    top_n = min(validate_top_n(top_n), len(corpus))
    query = model.embed(image[None])[0]
    found = similarity_query(model.head, query, state.corpus_embeddings(), top_n)

    result = f"🔎 **Most similar ({top_n})**"
    for idx, dist in found.similar:
        result += f"\n• #{idx} (label {int(corpus.labels[idx])}): distance² {dist:.4f}"
    result += f"\n\n↔️ **Most dissimilar ({top_n})**"
    for idx, dist in found.dissimilar:
        result += f"\n• #{idx} (label {int(corpus.labels[idx])}): distance² {dist:.4f}"
    return result


def explain_sample(state: ModelState, pixels=None, sample_index=None, strategy: str = "intensity",
                   tau: Optional[float] = None) -> str:
    model = state.model
    image = state.image({"pixels": pixels, "sample_index": sample_index})
    frm = guided_backprop(model, image, strategy=strategy)
    result = f"""🖼️ **Feature response**

• Average local entropy: {frm.average_entropy:.4f} bits
• Entropy map: {frm.entropy_map.shape[0]}x{frm.entropy_map.shape[1]} patches, min {frm.entropy_map.min():.4f}, max {frm.entropy_map.max():.4f}
• Response range: [{frm.map.min():.4g}, {frm.map.max():.4g}]"""
    if tau is not None:
        flagged = detect(frm.average_entropy, float(tau))
        result += f"\n• Detector (tau {float(tau):.4f}): {'🚨 flagged as adversarial' if flagged else '✅ looks clean'}"
    return result


def attack_and_detect(state: ModelState, pixels=None, sample_index=None, label: Optional[int] = None,
                      attack: str = "fgsm", epsilon: float = 0.25, step: float = 1.0,
                      tau: Optional[float] = None) -> str:
    model = state.model
    arguments = {"pixels": pixels, "sample_index": sample_index, "label": label}
    image = state.image(arguments)
    gt = state.label(arguments, image)
    config = AttackConfig(attack=attack, epsilon=epsilon, step=step)
    res = run_attack(model, image, gt, config)
    clean_score = guided_backprop(model, res.original).average_entropy
    adv_score = guided_backprop(model, res.adversarial).average_entropy

    result = f"""⚔️ **{attack} attack** (label {gt})

• Prediction: {res.original_pred} → {res.adversarial_pred} ({'✅ success' if res.success else '❌ no flip'})
• Ground-truth confidence: {res.gt_conf_before:.4f} → {res.gt_conf_after:.4f}
• Perturbation: L2 {res.l2:.4f}, Linf {res.linf:.4f}

🔍 **Entropy scores**
• Clean: {clean_score:.4f}
• Adversarial: {adv_score:.4f}"""
    if tau is not None:
        result += (f"\n• Detector (tau {float(tau):.4f}): clean {'flagged' if detect(clean_score, float(tau)) else 'passed'}, "
                   f"adversarial {'flagged' if detect(adv_score, float(tau)) else 'passed'}")
    return result


def get_usage_stats() -> str:
    """Get tool usage statistics."""
    uptime = datetime.now() - tool_usage["start_time"]
    stats = f"""📊 **Tool Usage Statistics**

🚀 **Server Info**
• Uptime: {str(uptime).split('.')[0]}
• Total Calls: {tool_usage['total_calls']}
• Errors: {tool_usage['errors']}

📈 **By Tool**"""
    for tool, count in tool_usage["by_tool"].items():
        stats += f"\n• {tool}: {count} calls"
    return stats


# ============================================================================
# HTTP ENDPOINTS
# ============================================================================

def create_app(server: Optional[MCPServer] = None) -> FastAPI:
    server = server or MCPServer()
    app = FastAPI(title="rbfsnt MCP Server", version=VERSION)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.post("/message")
    async def handle_mcp_message(message: dict):
        """Handle MCP protocol messages over HTTP."""
        return await server.handle_message(message)

    @app.get("/health")
    async def health_check():
        return {"status": "healthy", "timestamp": datetime.now().isoformat(), "tools_count": len(server.tools)}

    @app.get("/")
    async def root():
        return {"message": "rbfsnt MCP Server", "version": VERSION, "tools": len(server.tools)}

    return app


app = create_app()

# ============================================================================
# STDIO MODE
# ============================================================================

async def stdio_main(server: Optional[MCPServer] = None):
    """Main loop for stdio transport: one JSON-RPC message per line."""
    logger.info("MCP Server starting in stdio mode...")
    server = server or MCPServer()
    try:
        while True:
            line = await asyncio.get_event_loop().run_in_executor(None, sys.stdin.readline)
            if not line:
                logger.info("stdin closed, shutting down")
                break
            if not line.strip():
                continue
            try:
                message = json.loads(line.strip())
                response = await server.handle_message(message)
                if response is not None:
                    print(json.dumps(response), flush=True)
            except json.JSONDecodeError:
                logger.error(f"Invalid JSON received: {line.strip()[:200]}")
    except KeyboardInterrupt:
        logger.info("MCP Server shutting down...")


# ============================================================================
# MAIN APPLICATION
# ============================================================================

def main(argv: Optional[List[str]] = None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    configure_logging()
    if "--http" in argv:
        port = int(os.environ.get("PORT", DEFAULT_PORT))
        logger.info(f"🚀 MCP Server starting in HTTP mode on port {port}")
        uvicorn.run(app, host="0.0.0.0", port=port)
    else:
        logger.info("🚀 MCP Server starting in stdio mode")
        asyncio.run(stdio_main())


if __name__ == "__main__":
    main()
