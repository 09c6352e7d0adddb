//! Optimal values and greedy paths of the two shipped gridworlds.
//!
//! `cargo run --example gridworld_oracle`

use cpi_lab::dp::value_iteration;
use cpi_lab::envs::{build_four_room, build_gridworld, GridSpec, GridWorld};
use cpi_lab::experiment::greedy_return;

const ARROWS: [char; 4] = ['^', 'v', '>', '<'];

fn show(name: &str, grid: &GridWorld) -> cpi_lab::Result<()> {
    let mdp = grid.mdp();
    let (_, v, policy) = value_iteration(mdp, 1e-10)?;
    let spec = grid.spec();
    let moves = spec.distance(spec.start, spec.goal).expect("goal is reachable");
    println!(
        "{name}: {} states, BFS distance {moves}, V*(start) = {:.4}, greedy return {}",
        mdp.n_states(),
        v.get(mdp.start_state()),
        greedy_return(mdp, &policy, 30)?
    );
    let goal = grid.goal_state();
    print!(
        "{}",
        grid.render(|s| if s == goal { 'G' } else { ARROWS[policy.greedy_action(s)] })
    );
    println!();
    Ok(())
}

fn main() -> cpi_lab::Result<()> {
    show("grid7x7", &build_gridworld(&GridSpec::grid7x7(), 0.9)?)?;
    let (four_room, rooms) = build_four_room(0.9)?;
    show("fourroom", &four_room)?;
    for room in rooms.all() {
        println!("{:<12} {} cells", room.name, room.len());
    }
    Ok(())
}
