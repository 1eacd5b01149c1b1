#!/usr/bin/env python
"""remote_backends.py

The remote chat policy and remote segmenter speak small JSON protocols over
HTTP. Here both servers are in-process stubs, so the script runs offline; point
the clients at real servers by passing a URL and dropping ``transport``.
"""

import json

import httpx
import numpy as np

from refineseg import RemoteChatPolicy, RemoteSegmenter, synth_generate
from refineseg.codec import render_prompt
from refineseg.grpo import infer
from refineseg.pngio import encode_png_b64

sample = synth_generate(seed=1, n=1)[0]
full = sample.gt_boxes[0]


def chat_server(request):
    body = json.loads(request.content)
    parts = body["messages"][0]["content"]
    text = parts[-1]["text"]
    box = [full.x1, full.y1, full.x2, full.y2]
    if "points" in text:
        answer = [{"bbox_2d": box, "points": [[(full.x1 + full.x2) / 2, (full.y1 + full.y2) / 2]]}]
    else:
        answer = [{"bbox_2d": box}]
    reply = f"<think>{len(parts) - 1} images received</think><answer>{json.dumps(answer)}</answer>"
    return httpx.Response(200, json={"text": reply})


def mask_server(request):
    body = json.loads(request.content)
    m = np.zeros(sample.gt_mask.shape, bool)
    x1, y1, x2, y2 = (int(v) for v in body["boxes"][0])
    if body["points"]:
        m[y1:y2, x1:x2] = True
    else:
        m[y1 + 4 : y2 - 4, x1 + 4 : x2 - 4] = True
    return httpx.Response(200, json={"mask": encode_png_b64(m)})


policy = RemoteChatPolicy("http://chat.local/v1", transport=httpx.MockTransport(chat_server))
segmenter = RemoteSegmenter("http://segmenter.local/segment", transport=httpx.MockTransport(mask_server))

print(render_prompt(sample, 1).text)
print(policy.chat(render_prompt(sample, 1).text, [sample.map, sample.satellite]))

coarse, final = infer(policy, segmenter, sample)
print("coarse pixels", int(coarse.sum()), "final pixels", int(final.sum()), "gt pixels", int(sample.gt_mask.sum()))
