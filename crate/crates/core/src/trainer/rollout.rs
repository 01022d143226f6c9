//! Batched episode rollouts.
//!
//! All episodes of a batch run in lockstep. Rows of every network input are
//! ordered agent-major, episode-minor, so one forward pass per parameter
//! slot serves every agent that uses the slot.

use serde::{Deserialize, Serialize};

use super::{Result, RolloutRngs, TrainError};
use crate::discretize::{discretize, DiscretizerConfig, NoiseDraw};
use crate::envs::{sample_flips, ChannelConfig, EnvLayout, MultiAgentEnv};
use crate::gradcore::{argmax, Graph, Tensor, Var};
use crate::nets::{a_net_forward, c_net_forward, select_action, AgentParams};

pub(super) struct Ctx<'a, E> {
    pub env: &'a E,
    pub layout: &'a EnvLayout,
    pub slots: &'a [AgentParams],
    pub sharing: bool,
    pub discretizer: DiscretizerConfig,
    pub channel: &'a ChannelConfig,
    pub channel_active: bool,
    pub ablate: bool,
    pub gamma: f64,
}

impl<E> Ctx<'_, E> {
    fn slot_of(&self, agent: usize) -> usize {
        if self.sharing {
            0
        } else {
            agent
        }
    }

    /// `(slot, agents)` pairs in slot order.
    fn groups(&self, agents: &[usize]) -> Vec<(usize, Vec<usize>)> {
        let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
        for &a in agents {
            let s = self.slot_of(a);
            match out.iter_mut().find(|(slot, _)| *slot == s) {
                Some((_, v)) => v.push(a),
                None => out.push((s, vec![a])),
            }
        }
        out.sort_by_key(|(s, _)| *s);
        out
    }
}

/// Graph handles for one slot: `(a_net, c_net)` parameters.
pub type SlotVars = (Vec<Var>, Vec<Var>);

pub(super) fn bind_all(slots: &[AgentParams], graph: &mut Graph) -> Vec<SlotVars> {
    slots
        .iter()
        .map(|s| (s.a_net.bind(graph), s.c_net.bind(graph)))
        .collect()
}

/// Training loss of one batch and the handles needed to read gradients.
pub struct LossGraph {
    pub loss: Var,
    pub bound: Vec<SlotVars>,
    pub amplitude: Option<f64>,
    pub mean_return: f64,
}

/// Q-values chosen by one group of actors at one step.
pub(super) struct ActorStep {
    slot: usize,
    /// Episode index of each row.
    episode: Vec<usize>,
    q_chosen: Var,
    /// A-Net input values (observation then received messages).
    input: Tensor,
}

pub(super) struct RolloutOut {
    pub returns: Vec<f64>,
    /// Per step: team reward per episode.
    rewards: Vec<Vec<f64>>,
    steps: Vec<Vec<ActorStep>>,
    abs_logit_sum: f64,
    logit_count: usize,
    pub trace: Vec<TraceRecord>,
}

impl RolloutOut {
    pub fn amplitude(&self) -> Option<f64> {
        (self.logit_count > 0).then(|| self.abs_logit_sum / self.logit_count as f64)
    }
}

/// One step of one episode, for structured logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    pub step: usize,
    pub observations: Vec<Vec<f64>>,
    /// Message broadcast by each agent, before the channel.
    pub messages_sent: Vec<Option<Vec<f64>>>,
    /// Concatenated incoming messages of each agent, after the channel.
    pub messages_received: Vec<Option<Vec<f64>>>,
    pub actions: Vec<Option<usize>>,
    pub reward: f64,
}

fn stack_obs<E: MultiAgentEnv>(envs: &[E], agents: &[usize], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(agents.len() * envs.len() * width);
    for &a in agents {
        for e in envs {
            e.observe(a, &mut data);
        }
    }
    Tensor::from_vec(agents.len() * envs.len(), width, data)
}

pub(super) fn rollout<E: MultiAgentEnv>(
    ctx: &Ctx<'_, E>,
    graph: &mut Graph,
    bound: &[SlotVars],
    epsilon: f64,
    episodes: usize,
    rngs: &mut RolloutRngs,
    trace: bool,
) -> Result<RolloutOut> {
    let layout = ctx.layout;
    let bits = layout.message_bits;
    let n = layout.n_agents;
    let mut envs: Vec<E> = (0..episodes)
        .map(|_| {
            let mut e = ctx.env.clone();
            e.reset(&mut rngs.env);
            e
        })
        .collect();
    let sender_groups = ctx.groups(&layout.senders);
    let actor_groups = ctx.groups(&layout.actors);
    let mut out = RolloutOut {
        returns: vec![0.0; episodes],
        rewards: Vec::with_capacity(layout.horizon),
        steps: Vec::with_capacity(layout.horizon),
        abs_logit_sum: 0.0,
        logit_count: 0,
        trace: Vec::new(),
    };

    for t in 0..layout.horizon {
        let mut records: Vec<TraceRecord> = if trace {
            envs.iter()
                .enumerate()
                .map(|(b, e)| TraceRecord {
                    episode: b,
                    step: t,
                    observations: (0..n)
                        .map(|a| {
                            let mut o = Vec::new();
                            e.observe(a, &mut o);
                            o
                        })
                        .collect(),
                    messages_sent: vec![None; n],
                    messages_received: vec![None; n],
                    actions: vec![None; n],
                    reward: 0.0,
                })
                .collect()
        } else {
            Vec::new()
        };

        // Communication: every sender's C-Net output goes through the unit.
        let mut row_of = vec![usize::MAX; n * episodes];
        let mut parts = Vec::new();
        let mut offset = 0;
        for (slot, senders) in &sender_groups {
            let width = layout.obs_dims[senders[0]];
            let obs = graph.constant(stack_obs(&envs, senders, width));
            let logits = c_net_forward(&ctx.slots[*slot].c_net, graph, &bound[*slot].1, obs)?;
            let lv = graph.value(logits).data();
            if lv.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteLoss {
                    iteration: usize::MAX,
                    loss: f64::NAN,
                    detail: format!("non-finite message logits at step {t}"),
                });
            }
            out.abs_logit_sum += lv.iter().map(|x| x.abs()).sum::<f64>();
            out.logit_count += lv.len();
            let noise = NoiseDraw::sample(&ctx.discretizer, lv.len(), &mut rngs.noise);
            let m = discretize(graph, &ctx.discretizer, logits, noise)?;
            for (i, &s) in senders.iter().enumerate() {
                for b in 0..episodes {
                    row_of[s * episodes + b] = offset + i * episodes + b;
                }
            }
            offset += senders.len() * episodes;
            parts.push(m);
        }
        let all = match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(graph.concat_rows(&parts)?),
        };
        if let Some(all) = all {
            let mv = graph.value(all).clone();
            for (b, e) in envs.iter_mut().enumerate() {
                let msgs: Vec<Vec<f64>> = layout
                    .senders
                    .iter()
                    .map(|&s| mv.row_slice(row_of[s * episodes + b]).to_vec())
                    .collect();
                if trace {
                    for (&s, m) in layout.senders.iter().zip(&msgs) {
                        records[b].messages_sent[s] = Some(m.clone());
                    }
                }
                e.deliver(msgs)?;
            }
        }

        // Action: receivers read their observation and incoming messages.
        let mut step_groups = Vec::with_capacity(actor_groups.len());
        let mut action_of = vec![0usize; n * episodes];
        for (slot, actors) in &actor_groups {
            let rows = actors.len() * episodes;
            let width = layout.obs_dims[actors[0]];
            let inc_dim = layout.incoming_dim(actors[0]);
            let obs_t = stack_obs(&envs, actors, width);
            let obs = graph.constant(obs_t.clone());
            let incoming = match all {
                Some(all) if inc_dim > 0 && !ctx.ablate => {
                    let mut index = Vec::with_capacity(rows * inc_dim);
                    let mut mask = Vec::with_capacity(rows * inc_dim);
                    for &r in actors {
                        for b in 0..episodes {
                            for s in layout.incoming_senders(r) {
                                let base = row_of[s * episodes + b] * bits;
                                index.extend(base..base + bits);
                                let flips = if ctx.channel_active {
                                    sample_flips(ctx.channel, bits, &mut rngs.channel)
                                } else {
                                    Vec::new()
                                };
                                let start = mask.len();
                                mask.resize(start + bits, false);
                                for f in flips {
                                    mask[start + f] = true;
                                }
                            }
                        }
                    }
                    let g = graph.gather(all, index, rows, inc_dim)?;
                    graph.flip(g, mask)?
                }
                _ => graph.constant(Tensor::zeros(rows, inc_dim)),
            };
            let inc_t = graph.value(incoming).clone();
            let q = a_net_forward(&ctx.slots[*slot].a_net, graph, &bound[*slot].0, obs, incoming)?;
            let qv = graph.value(q).clone();
            let na = layout.n_actions;
            let mut pick = Vec::with_capacity(rows);
            for row in 0..rows {
                let a = select_action(qv.row_slice(row), epsilon, &mut rngs.explore)?;
                pick.push(row * na + a);
                let agent = actors[row / episodes];
                action_of[agent * episodes + row % episodes] = a;
            }
            let q_chosen = graph.gather(q, pick, rows, 1)?;
            let mut input = Vec::with_capacity(rows * (width + inc_dim));
            for row in 0..rows {
                input.extend_from_slice(obs_t.row_slice(row));
                input.extend_from_slice(inc_t.row_slice(row));
            }
            if trace {
                for row in 0..rows {
                    let (agent, b) = (actors[row / episodes], row % episodes);
                    records[b].messages_received[agent] = Some(inc_t.row_slice(row).to_vec());
                }
            }
            step_groups.push(ActorStep {
                slot: *slot,
                episode: (0..rows).map(|row| row % episodes).collect(),
                q_chosen,
                input: Tensor::from_vec(rows, width + inc_dim, input),
            });
        }

        let mut rewards = Vec::with_capacity(episodes);
        for (b, e) in envs.iter_mut().enumerate() {
            let acts: Vec<usize> = layout
                .actors
                .iter()
                .map(|&a| action_of[a * episodes + b])
                .collect();
            let outcome = e.step(&acts)?;
            let last = t + 1 == layout.horizon;
            if outcome.done != last {
                return Err(TrainError::Config(format!(
                    "episode {b} reported done={} at step {t} of a {}-step horizon",
                    outcome.done, layout.horizon
                )));
            }
            out.returns[b] += outcome.reward;
            rewards.push(outcome.reward);
            if trace {
                for &a in &layout.actors {
                    records[b].actions[a] = Some(action_of[a * episodes + b]);
                }
                records[b].reward = outcome.reward;
            }
        }
        out.rewards.push(rewards);
        out.steps.push(step_groups);
        out.trace.extend(records);
    }
    if trace {
        out.trace.sort_by_key(|r| (r.episode, r.step));
    }
    Ok(out)
}

/// `r` at terminal steps, `r + gamma * max_a Q(next, a; target)` otherwise.
pub fn td_target(reward: f64, gamma: f64, next_max_q: Option<f64>) -> f64 {
    match next_max_q {
        Some(q) => reward + gamma * q,
        None => reward,
    }
}

/// `(1 / episodes) * sum over episodes, acting agents and steps of (y - Q)^2`.
/// Targets come from the target A-Nets and enter the graph as constants.
pub(super) fn td_loss<E>(ctx: &Ctx<'_, E>, graph: &mut Graph, out: &RolloutOut) -> Result<Var> {
    let episodes = out.returns.len();
    let horizon = out.steps.len();
    let mut terms = Vec::new();
    for t in 0..horizon {
        for (g, step) in out.steps[t].iter().enumerate() {
            let next_max: Option<Vec<f64>> = if t + 1 < horizon {
                let next = &out.steps[t + 1][g];
                let q = ctx.slots[next.slot].a_target.forward_plain(&next.input)?;
                Some((0..q.rows()).map(|r| q.row_slice(r)[argmax(q.row_slice(r))]).collect())
            } else {
                None
            };
            let y: Vec<f64> = step
                .episode
                .iter()
                .enumerate()
                .map(|(row, &b)| {
                    td_target(out.rewards[t][b], ctx.gamma, next_max.as_ref().map(|v| v[row]))
                })
                .collect();
            let y = graph.constant(Tensor::from_vec(y.len(), 1, y));
            terms.push(graph.squared_error(step.q_chosen, y)?);
        }
    }
    if terms.is_empty() {
        return Err(TrainError::Config("environment has no acting agents".into()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = graph.add(total, t)?;
    }
    Ok(graph.scale(total, 1.0 / episodes as f64))
}
