"""
Representation of a roundpipe workspace.

## Exemplary folder structure
- workspace.yml (name, author and the experiments, each a full run config)
- costs_measured.json (optional measured layer times referenced by an experiment)
- baseline_gpipe.json (result of the experiment "baseline_gpipe", with the hash of its config)

## Examples
- the user creates a workspace for a cluster they want to plan for (roundpipe workspace init)
- they add experiments for the schedules and models they care about by editing workspace.yml
- they run all experiments; unchanged ones are skipped (roundpipe workspace execute)
- they compare bubble ratios across experiments (roundpipe workspace diff a b c)
"""
