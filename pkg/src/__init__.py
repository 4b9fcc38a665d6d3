# H-DAGap - gap-based crowd navigation with uncertainty-aware CFS and SSA
