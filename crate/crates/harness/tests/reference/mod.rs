//! A plain layer-local MoE language model written against nested vectors,
//! sharing no code with the library beyond parameter import. Used as the
//! reference that an empty universal pool must reproduce.

use moue_core::model::MoueModel;

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

type Mat = Vec<Vec<f64>>;

fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

fn from_matrix(m: &moue_core::Matrix) -> Mat {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[derive(Clone)]
pub struct RefParams {
    emb: Mat,
    readout: Mat,
    /// `[layer][expert]`
    up: Vec<Vec<Mat>>,
    down: Vec<Vec<Mat>>,
    /// `[layer]`, `d x experts`
    wg: Vec<Mat>,
    bg: Vec<Vec<f64>>,
}

impl RefParams {
    fn zeros_like(&self) -> Self {
        let z = |m: &Mat| zeros(m.len(), m[0].len());
        RefParams {
            emb: z(&self.emb),
            readout: z(&self.readout),
            up: self.up.iter().map(|l| l.iter().map(z).collect()).collect(),
            down: self.down.iter().map(|l| l.iter().map(z).collect()).collect(),
            wg: self.wg.iter().map(z).collect(),
            bg: self.bg.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn slots(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        for m in [&mut self.emb, &mut self.readout] {
            out.extend(m.iter_mut().flatten());
        }
        for l in self.up.iter_mut().chain(self.down.iter_mut()) {
            out.extend(l.iter_mut().flatten().flatten());
        }
        out.extend(self.wg.iter_mut().flatten().flatten());
        out.extend(self.bg.iter_mut().flatten());
        out
    }
}

pub struct RefMoe {
    pub params: RefParams,
    velocity: Option<RefParams>,
    k: usize,
    experts: usize,
}

struct LayerCache {
    x: Mat,
    probs: Mat,
    sel: Vec<Vec<usize>>,
    gates: Mat,
    pre: Vec<Mat>,
    out: Vec<Mat>,
}

/// Per-layer local expert choices of one step, as global IDs.
pub type Choices = Vec<Vec<Vec<usize>>>;

impl RefMoe {
    /// Copies the initial weights of a model with an empty universal pool.
    pub fn from_model(model: &MoueModel) -> Self {
        let layers = model.num_layers();
        let e = model.map.locals_per_layer();
        let p = &model.params;
        let mut up = Vec::new();
        let mut down = Vec::new();
        let mut wg = Vec::new();
        let mut bg = Vec::new();
        for l in 0..layers {
            let ids: Vec<usize> = model.map.local_block(l).collect();
            up.push(ids.iter().map(|&id| from_matrix(&p.experts[id].up)).collect());
            down.push(ids.iter().map(|&id| from_matrix(&p.experts[id].down)).collect());
            let w = &p.routers[l].w_gate;
            wg.push((0..w.rows()).map(|r| ids.iter().map(|&id| w.get(r, id)).collect()).collect());
            bg.push(ids.iter().map(|&id| p.routers[l].b_gate.get(0, id)).collect());
        }
        RefMoe {
            params: RefParams {
                emb: from_matrix(&p.embedding),
                readout: from_matrix(&p.readout),
                up,
                down,
                wg,
                bg,
            },
            velocity: None,
            k: model.map.top_k(),
            experts: e,
        }
    }

    fn mix(h: &Mat, seq_len: usize) -> Mat {
        let mut out = h.clone();
        for (row, o) in out.iter_mut().enumerate() {
            let t = row % seq_len;
            let start = row - t;
            for c in 0..o.len() {
                let mean = (start..=row).map(|s| h[s][c]).sum::<f64>() / (t + 1) as f64;
                o[c] = 0.5 * h[row][c] + 0.5 * mean;
            }
        }
        out
    }

    fn mix_back(dx: &Mat, seq_len: usize) -> Mat {
        let mut out = zeros(dx.len(), dx[0].len());
        for s in 0..dx.len() {
            let t0 = s % seq_len;
            let end = s - t0 + seq_len;
            for c in 0..dx[0].len() {
                let tail: f64 = (s..end).map(|r| dx[r][c] / ((r % seq_len) + 1) as f64).sum();
                out[s][c] = 0.5 * dx[s][c] + 0.5 * tail;
            }
        }
        out
    }

    /// One SGD step on cross-entropy plus `aux_coef` times the mean per-layer
    /// Switch loss `alpha * n * sum f P`. Returns the task loss and choices.
    pub fn step(
        &mut self,
        batch: &[Vec<usize>],
        lr: f64,
        momentum: f64,
        aux_coef: f64,
        alpha: f64,
    ) -> (f64, Choices) {
        let p = &self.params;
        let seq_len = batch[0].len();
        let tokens: Vec<usize> = batch.iter().flatten().copied().collect();
        let n_tok = tokens.len();
        let layers = p.wg.len();
        let d = p.emb[0].len();
        let vocab = p.readout[0].len();
        let mut h: Mat = tokens.iter().map(|&t| p.emb[t].clone()).collect();
        let mut caches = Vec::new();
        for l in 0..layers {
            let x = Self::mix(&h, seq_len);
            let mut cache = LayerCache {
                x: x.clone(),
                probs: Vec::new(),
                sel: Vec::new(),
                gates: Vec::new(),
                pre: Vec::new(),
                out: Vec::new(),
            };
            for t in 0..n_tok {
                let z: Vec<f64> = (0..self.experts)
                    .map(|i| (0..d).map(|r| x[t][r] * p.wg[l][r][i]).sum::<f64>() + p.bg[l][i])
                    .collect();
                let mut order: Vec<usize> = (0..self.experts).collect();
                order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
                order.truncate(self.k);
                let gates = softmax(&order.iter().map(|&i| z[i]).collect::<Vec<_>>());
                let mut pre = Vec::new();
                let mut outs = Vec::new();
                for (&i, &g) in order.iter().zip(&gates) {
                    let f = p.up[l][i][0].len();
                    let a: Vec<f64> =
                        (0..f).map(|j| (0..d).map(|r| x[t][r] * p.up[l][i][r][j]).sum()).collect();
                    let y: Vec<f64> = (0..d)
                        .map(|c| (0..f).map(|j| silu(a[j]) * p.down[l][i][j][c]).sum())
                        .collect();
                    for c in 0..d {
                        h[t][c] += g * y[c];
                    }
                    pre.push(a);
                    outs.push(y);
                }
                cache.probs.push(softmax(&z));
                cache.sel.push(order);
                cache.gates.push(gates);
                cache.pre.push(pre);
                cache.out.push(outs);
            }
            caches.push(cache);
        }

        let mut g = p.zeros_like();
        let count = batch.len() * (seq_len - 1);
        let mut loss = 0.0;
        let mut dh = zeros(n_tok, d);
        for t in 0..n_tok {
            if t % seq_len == seq_len - 1 {
                continue;
            }
            let logits: Vec<f64> =
                (0..vocab).map(|v| (0..d).map(|c| h[t][c] * p.readout[c][v]).sum()).collect();
            let probs = softmax(&logits);
            let target = tokens[t + 1];
            loss -= probs[target].ln();
            for v in 0..vocab {
                let dl = (probs[v] - if v == target { 1.0 } else { 0.0 }) / count as f64;
                for c in 0..d {
                    g.readout[c][v] += h[t][c] * dl;
                    dh[t][c] += p.readout[c][v] * dl;
                }
            }
        }
        loss /= count as f64;

        for l in (0..layers).rev() {
            let cache = &caches[l];
            let mut f_bar = vec![0.0; self.experts];
            for sel in &cache.sel {
                for &i in sel {
                    f_bar[i] += 1.0 / (n_tok * self.k) as f64;
                }
            }
            let a: Vec<f64> = f_bar
                .iter()
                .map(|f| aux_coef * alpha * self.experts as f64 * f / (layers * n_tok) as f64)
                .collect();
            let mut dx = zeros(n_tok, d);
            for t in 0..n_tok {
                let x = &cache.x[t];
                let mut dz = vec![0.0; self.experts];
                let mut dgs = Vec::new();
                for (slot, &i) in cache.sel[t].iter().enumerate() {
                    let gate = cache.gates[t][slot];
                    let y = &cache.out[t][slot];
                    let pre = &cache.pre[t][slot];
                    let f = pre.len();
                    dgs.push((0..d).map(|c| y[c] * dh[t][c]).sum::<f64>());
                    let dy: Vec<f64> = (0..d).map(|c| gate * dh[t][c]).collect();
                    let mut da = vec![0.0; f];
                    for j in 0..f {
                        let s = silu(pre[j]);
                        let mut back = 0.0;
                        for c in 0..d {
                            g.down[l][i][j][c] += s * dy[c];
                            back += p.down[l][i][j][c] * dy[c];
                        }
                        da[j] = back * silu_grad(pre[j]);
                    }
                    for r in 0..d {
                        for j in 0..f {
                            g.up[l][i][r][j] += x[r] * da[j];
                            dx[t][r] += p.up[l][i][r][j] * da[j];
                        }
                    }
                }
                let wsum: f64 = cache.gates[t].iter().zip(&dgs).map(|(a, b)| a * b).sum();
                for (slot, &i) in cache.sel[t].iter().enumerate() {
                    dz[i] += cache.gates[t][slot] * (dgs[slot] - wsum);
                }
                let probs = &cache.probs[t];
                let pa: f64 = probs.iter().zip(&a).map(|(p, a)| p * a).sum();
                for i in 0..self.experts {
                    dz[i] += probs[i] * (a[i] - pa);
                    g.bg[l][i] += dz[i];
                    for r in 0..d {
                        g.wg[l][r][i] += x[r] * dz[i];
                        dx[t][r] += p.wg[l][r][i] * dz[i];
                    }
                }
            }
            let back = Self::mix_back(&dx, seq_len);
            for t in 0..n_tok {
                for c in 0..d {
                    dh[t][c] += back[t][c];
                }
            }
        }
        for (t, &tok) in tokens.iter().enumerate() {
            for c in 0..d {
                g.emb[tok][c] += dh[t][c];
            }
        }

        let mut v = self.velocity.take().unwrap_or_else(|| g.zeros_like());
        let mut gs = g;
        for (vi, gi) in v.slots().into_iter().zip(gs.slots()) {
            *vi = momentum * *vi + *gi;
        }
        for (pi, vi) in self.params.slots().into_iter().zip(v.slots()) {
            *pi -= lr * *vi;
        }
        self.velocity = Some(v);

        let choices = caches
            .iter()
            .enumerate()
            .map(|(l, c)| {
                c.sel.iter().map(|s| s.iter().map(|&i| l * self.experts + i).collect()).collect()
            })
            .collect();
        (loss, choices)
    }
}
