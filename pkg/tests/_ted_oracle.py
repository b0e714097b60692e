"""Brute-force ordered tree edit distance by exhaustive search over valid edit mappings.

A mapping is a partial one-to-one node correspondence that preserves ancestry
and left-to-right order.  Its cost is the rename cost of mapped pairs plus one
per unmapped node on either side; the distance is the minimum over mappings.
"""


def _index(root):
    nodes, parent, pre, post = [], [], {}, {}
    counter = [0, 0]

    def walk(n, par):
        k = len(nodes)
        nodes.append(n)
        parent.append(par)
        pre[k] = counter[0]
        counter[0] += 1
        for c in n.children:
            walk(c, k)
        post[k] = counter[1]
        counter[1] += 1

    walk(root, -1)
    anc = [[False] * len(nodes) for _ in nodes]
    for k in range(len(nodes)):
        p = parent[k]
        while p != -1:
            anc[p][k] = True
            p = parent[p]
    return nodes, anc, pre, post


def _left_of(a, b, anc, pre):
    # a is strictly left of b: a precedes b in preorder and is not its ancestor
    return pre[a] < pre[b] and not anc[a][b]


def brute_force_ted(t1, t2, rename):
    n1, anc1, pre1, _ = _index(t1)
    n2, anc2, pre2, _ = _index(t2)
    cost = [[rename(a, b) for b in n2] for a in n1]
    best = [float(len(n1) + len(n2))]
    pairs = []
    used = [False] * len(n2)

    def ok(i, j):
        for a, b in pairs:
            if anc1[a][i] != anc2[b][j] or anc1[i][a] != anc2[j][b]:
                return False
            if _left_of(a, i, anc1, pre1) != _left_of(b, j, anc2, pre2):
                return False
            if _left_of(i, a, anc1, pre1) != _left_of(j, b, anc2, pre2):
                return False
        return True

    def search(i, acc, n_mapped):
        # lower bound: remaining nodes on either side must at least be deleted or inserted pairwise
        rest1 = len(n1) - i
        lb = acc + abs((len(n2) - n_mapped) - rest1) if rest1 < len(n2) - n_mapped else acc
        if lb >= best[0]:
            return
        if i == len(n1):
            best[0] = min(best[0], acc + (len(n2) - n_mapped))
            return
        for j in range(len(n2)):
            if not used[j] and ok(i, j):
                used[j] = True
                pairs.append((i, j))
                search(i + 1, acc + cost[i][j], n_mapped + 1)
                pairs.pop()
                used[j] = False
        search(i + 1, acc + 1, n_mapped)  # delete node i

    search(0, 0.0, 0)
    return best[0]
