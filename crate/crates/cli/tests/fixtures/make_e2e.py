"""Regenerates the 50-prompt end-to-end mock fixture in ./e2e.

    python3 make_e2e.py

Outputs prompts.jsonl, labels.jsonl and mock.jsonl. The mock script answers
every prompt the pipeline sends (decomposition, relevance, span extraction,
true/false detection, self-consistency samples and judgments, token scoring,
hidden states) so a full run needs no network.
"""

import json
import random
from pathlib import Path

N_PROMPTS = 50
CLAIMS_PER_PROMPT = 3
SAMPLES = 20

PLACES = ["Avalon", "Brindle", "Corvale", "Dunmore", "Eastreach", "Fallow", "Glenrock",
          "Harrow", "Ironwood", "Jasper"]
TRADES = ["salt", "wool", "timber", "copper", "glass", "silk", "grain", "amber"]
FILLER = ("Local historians still debate the details of this period and the archives "
          "offer several competing accounts of how the town changed over time.")


def entity(i):
    return f"Entity{i:02d}"


def claims_for(i, rng):
    e = entity(i)
    return [
        f"{e} was founded in the year {1500 + 7 * i + rng.randrange(5)}.",
        f"{e} lies on the river near {PLACES[i % len(PLACES)]}.",
        f"{e} became known for its {TRADES[(3 * i) % len(TRADES)]} trade.",
    ][:CLAIMS_PER_PROMPT]


def response_for(i, claims):
    # three length bands: short, around 600 tokens, over 1000 tokens
    pad = [0, 24, 44][i % 3]
    parts = [f"{entity(i)} is a small town with a long history."]
    for k, c in enumerate(claims):
        parts.append(c)
        parts.extend([FILLER] * (pad // CLAIMS_PER_PROMPT + (k == 0) * (pad % CLAIMS_PER_PROMPT)))
    return " ".join(parts)


def main():
    rng = random.Random(7)
    out = Path(__file__).parent / "e2e"
    out.mkdir(exist_ok=True)
    prompts, labels = [], []
    extraction, decompose, detect, scoring, hidden, samples = [], [], [], [], [], []
    for i in range(N_PROMPTS):
        prompt = f"Tell me about {entity(i)}."
        claims = claims_for(i, rng)
        response = response_for(i, claims)
        prompts.append({"prompt_id": f"p{i:02d}", "prompt": prompt, "response": response})
        decompose.append({"contains": f"Response: {response}\n\nFacts:", "kind": "chat",
                          "reply": "\n".join(claims)})
        n_factual = 0
        for c in claims:
            factual = rng.random() < 0.5
            n_factual += factual
            labels.append({"claim_text": c, "label": "factual" if factual else "hallucinated"})
            extraction.append({"contains": f"Fact: {c}\n\nPassage:", "kind": "chat", "reply": c})
            p_true = rng.uniform(0.45, 0.95) if factual else rng.uniform(0.05, 0.6)
            detect.append({"contains": f"Claim: {c}\nAnswer:", "kind": "chat",
                           "label_probs": {"True": round(p_true * 0.9, 6),
                                           "False": round((1 - p_true) * 0.9, 6)}})
            base = 0.8 if factual else 0.45
            scoring.append({"contains": c, "kind": "score",
                            "token_probs": [round(min(0.99, max(0.01, base + rng.uniform(-0.3, 0.2))), 4)
                                            for _ in range(5)]})
            hidden.append({"contains": c, "kind": "hidden",
                           "hidden_shift": 0.4 if factual else -0.4})
        yes = round(SAMPLES * (0.2 + 0.6 * n_factual / CLAIMS_PER_PROMPT))
        samples.append({"contains": prompt, "kind": "chat",
                        "replies": [f"Sample {j} about {entity(i)}, verdict {'yes' if j < yes else 'no'}."
                                    for j in range(SAMPLES)]})

    rules = (
        [{"settings": {"name": "mock-e2e", "seed": 11, "layers": 4, "hidden_size": 8}}]
        + extraction
        + [{"contains": "Does the following statement help answer the question?", "kind": "chat",
            "reply": "Yes"}]
        + decompose
        + detect
        + [{"contains": "verdict yes.\n\nClaim:", "kind": "chat", "reply": "Yes"},
           {"contains": "verdict no.\n\nClaim:", "kind": "chat", "reply": "No"}]
        + samples
        + scoring
        + hidden
    )
    write(out / "prompts.jsonl", prompts)
    write(out / "labels.jsonl", labels)
    write(out / "mock.jsonl", rules)


def write(path, rows):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
