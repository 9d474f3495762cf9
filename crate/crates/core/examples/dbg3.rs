use ccmpc_core::*;

fn main() {
    let scenario = parse_scenario(std::path::Path::new("scenarios/crowd.json")).unwrap();
    // One-tick run at seed 5 reproduces the failing t=0 solve.
    let log = run_closed_loop(&scenario, 0.2, 5).unwrap();
    println!("t=0 failed: {}", log.records[0].solver_failed);
}
