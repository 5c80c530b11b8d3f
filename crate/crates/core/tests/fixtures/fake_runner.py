"""Minimal stand-in for the code-tool runner, used by the engine's tests.

It speaks the framed protocol but does no sandboxing. Set FAKE_RUNNER_CRASH_MARKER
to a path to make the process exit abruptly the first time it sees the text
"__crash__" (the marker file records that the crash happened).
"""
import ast
import json
import os
import sys

out = sys.stdout.buffer
inp = sys.stdin.buffer
tools = {}


def send(obj):
    data = json.dumps(obj).encode()
    out.write(str(len(data)).encode() + b"\n" + data)
    out.flush()


def recv():
    header = inp.readline()
    if not header:
        sys.exit(0)
    return json.loads(inp.read(int(header)))


def probe(tool_id, source):
    try:
        tree = ast.parse(source)
    except SyntaxError as e:
        return {"status": "compile_error", "message": str(e)}
    funcs = [n for n in tree.body if isinstance(n, ast.FunctionDef)]
    if len(funcs) != 1 or len(funcs[0].args.args) != 1:
        return {"status": "compile_error", "message": "expected exactly one function of one argument"}
    ns = {}
    try:
        exec(compile(tree, tool_id, "exec"), ns)
        fn = ns[funcs[0].name]
        value = float(fn("a b c"))
    except Exception as e:
        return {"status": "runtime_error", "message": repr(e)}
    tools[tool_id] = fn
    return {"status": "ok", "probe_value": value}


def annotate(tool_id, texts):
    fn = tools.get(tool_id)
    if fn is None:
        return {"status": "runtime_error", "message": "unknown tool " + tool_id}
    values = []
    for item in texts:
        marker = os.environ.get("FAKE_RUNNER_CRASH_MARKER")
        if item["text"] == "__crash__" and marker and not os.path.exists(marker):
            open(marker, "w").close()
            os._exit(17)
        try:
            v = float(fn(item["text"]))
        except Exception:
            v = None
        values.append({"id": item["id"], "value": v})
    return {"status": "ok", "values": values}


out.write(b"featurist-runner 1\n")
out.flush()
while True:
    req = recv()
    op = req.get("op")
    if op == "probe":
        send(probe(req["tool_id"], req["source"]))
    elif op == "annotate":
        send(annotate(req["tool_id"], req["texts"]))
    elif op == "shutdown":
        send({"status": "ok"})
        sys.exit(0)
    else:
        send({"status": "runtime_error", "message": "unknown op"})
