//! Scripted expert controllers.
//!
//! Each expert is a proportional controller toward the waypoint of the
//! current task phase; the phase itself is read off the environment
//! state, so the controller needs no memory. Components are clipped to
//! [-1, 1] like any other action.

use super::{Attachment, EnvName, EnvState, ToyEnv};
use crate::env::euclidean;
use crate::Scalar;

/// Grip command strength; anything < 0 grasps, so full open/close keeps
/// the traces easy to read.
const OPEN: Scalar = 1.0;
const CLOSE: Scalar = -1.0;

pub(crate) fn action(env: &ToyEnv) -> Vec<Scalar> {
    let s = env.state();
    let spec = env.spec();
    let thr = spec.success_threshold;
    match spec.name {
        EnvName::PointReach => steer(&s.agent_a, &s.goal, spec.step_scale).to_vec(),
        EnvName::PointPickPlace => {
            let solved = euclidean(&s.object, &s.goal) < thr;
            let holding = s.attachment == Attachment::AgentA;
            if solved {
                // Release phase: open and hold position.
                vec![0.0, 0.0, OPEN]
            } else if holding {
                let m = steer(&s.agent_a, &s.goal, spec.step_scale);
                vec![m[0], m[1], CLOSE]
            } else {
                let m = steer(&s.agent_a, &s.object, spec.step_scale);
                let contact = euclidean(&s.agent_a, &s.object) < thr;
                let grip = if contact { CLOSE } else { OPEN };
                vec![m[0], m[1], grip]
            }
        }
        EnvName::BipointTransfer => transfer_action(s, thr, spec.step_scale),
        EnvName::PointTrack => {
            // Aim one velocity step ahead of the target.
            let lead = [
                s.object[0] + s.target_vel[0],
                s.object[1] + s.target_vel[1],
            ];
            steer(&s.agent_a, &lead, spec.step_scale).to_vec()
        }
    }
}

fn transfer_action(s: &EnvState, thr: Scalar, step_scale: Scalar) -> Vec<Scalar> {
    let handover = [0.0, s.goal[1]];
    let solved = euclidean(&s.object, &s.goal) < thr;
    if solved {
        return vec![0.0, 0.0, OPEN, 0.0, 0.0, OPEN];
    }
    match s.attachment {
        Attachment::AgentB => {
            // B carries to the goal; A stands clear.
            let mb = steer(&s.agent_b, &s.goal, step_scale);
            vec![0.0, 0.0, OPEN, mb[0], mb[1], CLOSE]
        }
        Attachment::AgentA => {
            // A carries to the handover point and releases there; B waits
            // at the handover with a closed grip, ready to catch.
            let delivered = euclidean(&s.object, &handover) < thr;
            let ma = if delivered {
                [0.0, 0.0]
            } else {
                steer(&s.agent_a, &handover, step_scale)
            };
            let grip_a = if delivered { OPEN } else { CLOSE };
            let mb = steer(&s.agent_b, &handover, step_scale);
            let grip_b = if euclidean(&s.agent_b, &handover) < 2.0 * thr {
                CLOSE
            } else {
                OPEN
            };
            vec![ma[0], ma[1], grip_a, mb[0], mb[1], grip_b]
        }
        Attachment::Free => {
            // Whoever's side the object is on fetches it; the other agent
            // pre-positions at the handover point.
            if s.object[0] <= -thr {
                let ma = steer(&s.agent_a, &s.object, step_scale);
                let grip_a = if euclidean(&s.agent_a, &s.object) < thr {
                    CLOSE
                } else {
                    OPEN
                };
                let mb = steer(&s.agent_b, &handover, step_scale);
                vec![ma[0], ma[1], grip_a, mb[0], mb[1], OPEN]
            } else {
                let mb = steer(&s.agent_b, &s.object, step_scale);
                let grip_b = if euclidean(&s.agent_b, &s.object) < thr {
                    CLOSE
                } else {
                    OPEN
                };
                vec![0.0, 0.0, OPEN, mb[0], mb[1], grip_b]
            }
        }
    }
}

/// Proportional step toward a waypoint, clipped per component. Within one
/// step of the waypoint this lands exactly on it.
fn steer(from: &[Scalar; 2], to: &[Scalar; 2], step_scale: Scalar) -> [Scalar; 2] {
    [
        ((to[0] - from[0]) / step_scale).clamp(-1.0, 1.0),
        ((to[1] - from[1]) / step_scale).clamp(-1.0, 1.0),
    ]
}
