"""Walk one question through the synthesis loop with a scripted model.

The scripted model first writes a program that hard-codes its answer, gets
told so by the automated checks, fixes it, then says FINISHED.

    python3 demos/synthesis_loop.py
"""

import json

from instsynth.core import AnswerKind, AnswerSpec, ReasoningInstance
from instsynth.provider import ScriptedProvider
from instsynth.sandbox import Sandbox
from instsynth.synthesis import LoopConfig, run_loop

question = "How many red marbles are in the bag: red, blue, red, green, red?"
inst = ReasoningInstance("demo-1", "marbles", question, AnswerSpec(AnswerKind.INTEGER))

symbols = {"marbles": ["red", "blue", "red", "green", "red"]}
lazy = "def solve(symbols):\n    return 3\n"
honest = "def solve(symbols):\n    return sum(1 for m in symbols['marbles'] if m == 'red')\n"


def block(tag, body):
    return f"```{tag}\n{body}```"


model = ScriptedProvider({
    "generate": ["I will list the marbles.\n" + block("json", json.dumps(symbols) + "\n") + "\n" + block("python", lazy)],
    "judge": ["No issues found."] * 5,
    "refine": ["Counting from the symbols instead.\n" + block("python", honest), "FINISHED"],
})

sandbox = Sandbox()
result = run_loop(inst, LoopConfig(max_iterations=5), model, sandbox)

for t in result.trace:
    flags = [k for k, v in t.feedback.issues.flags().items() if v]
    print(f"iteration {t.index}: returned {t.run.return_value!r}, issues {flags or 'none'}, then {t.action.value}")

print("answer:", result.final_answer.value)  # 3, now computed from the symbols
print("refinements:", result.refinements)
print("sandbox runs:", sandbox.calls)
print("tokens:", result.usage)

# the feedback the model saw after the first program
print()
print(result.trace[0].feedback.checker_output())
