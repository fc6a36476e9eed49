//! Roll out an untrained full agent with the teacher in control and print
//! the per-step trace: map size, frontier, mixing weight stats, the action
//! and how many map nodes the layout head labels correctly.

use lad::agent::{rollout, Agent, AgentConfig, Control, RolloutOptions};
use lad::codebook::{imagine_episode, CodebookConfig, CodebookKind};
use lad::env::{generate_dataset, DataConfig, Split};
use lad::tensor::Tape;
use lad::train::codebook_for;

fn main() -> lad::Result<()> {
    let data = generate_dataset(&DataConfig { train_houses: 4, val_unseen_houses: 2, ..DataConfig::default() }, 2)?;
    let agent = Agent::new(AgentConfig::default(), codebook_for(&data, CodebookKind::Visual, &CodebookConfig::default())?)?;
    let params = agent.init_params()?;
    println!("{} parameters", params.num_scalars());

    let ep = &data.episodes(Split::ValUnseen)[0];
    let house = data.house(&ep.house_id)?;
    let im = imagine_episode(ep, &data.vocab(), &data.config.house.prototypes(), 0.2, 0)?;
    let opts = RolloutOptions { control: Control::Teacher, labels: true, ..RolloutOptions::greedy() };
    let run = rollout(&mut Tape::new(), &params, &agent, ep, house, Some(&im), &opts)?;
    println!("{}: {} -> {}", ep.id, ep.start, ep.goal);
    for s in &run.steps {
        let t = &s.trace;
        let right = t.layout.iter().filter(|&&(n, k)| house.nodes[n].room_type == k).count();
        let lambda = t.lambda.map_or("-".to_string(), |[lo, mean, hi]| format!("{lo:.2}/{mean:.2}/{hi:.2}"));
        println!(
            "step {:>2} at {:>2}: map {:>2} frontier {:>2} layout {right}/{} lambda {lambda} action {}",
            t.step,
            t.node,
            t.map_size,
            t.frontier,
            t.layout.len(),
            t.action.map_or("STOP".to_string(), |n| n.to_string())
        );
    }
    Ok(())
}
