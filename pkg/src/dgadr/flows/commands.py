"""One flow per CLI subcommand."""

from dgadr.flows.base import BaseFlow, FlowNode
from dgadr.nodes.commands import (
    Analyze,
    Evaluate,
    GenerateDataset,
    GradCheck,
    LoadDataset,
    LoadModel,
    Loto,
    OptionalModel,
    ResolveConfig,
    Train,
)


def _chain(*node_classes: type) -> dict[str, FlowNode]:
    """Linear flow: each node hands over on success, any error ends the flow."""
    ids = ["start"] + [cls.__name__.lower() for cls in node_classes[1:]]
    definition = {}
    for index, (node_id, node_class) in enumerate(zip(ids, node_classes)):
        next_id = ids[index + 1] if index + 1 < len(ids) else "end"
        definition[node_id] = FlowNode(
            node_class=node_class, transitions={"success": next_id, "error": "end"}
        )
    return definition


gen_flow = BaseFlow(_chain(ResolveConfig, GenerateDataset), name="GenFlow")

train_flow = BaseFlow(_chain(ResolveConfig, LoadDataset, Train), name="TrainFlow")

loto_flow = BaseFlow(_chain(ResolveConfig, LoadDataset, Loto), name="LotoFlow")

eval_flow = BaseFlow(
    _chain(ResolveConfig, LoadDataset, LoadModel, Evaluate), name="EvalFlow"
)

analyze_flow = BaseFlow(
    _chain(ResolveConfig, LoadDataset, OptionalModel, Analyze), name="AnalyzeFlow"
)

gradcheck_flow = BaseFlow(_chain(ResolveConfig, GradCheck), name="GradCheckFlow")

FLOWS = {
    "gen": gen_flow,
    "train": train_flow,
    "loto": loto_flow,
    "eval": eval_flow,
    "analyze": analyze_flow,
    "gradcheck": gradcheck_flow,
}
