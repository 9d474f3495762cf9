//! Social-force pedestrian model: goal attraction with relaxation plus
//! exponential interpersonal repulsion, including repulsion from the robot's
//! ground projection.

use nalgebra::{Vector2, Vector3};

/// One simulated pedestrian walking a shared waypoint loop.
#[derive(Debug, Clone)]
pub struct Pedestrian {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
    /// Index into the shared waypoint loop.
    pub current_waypoint: usize,
    pub desired_speed: f64,
    pub radius: f64,
}

/// Interaction parameters of the social force model.
#[derive(Debug, Clone, Copy)]
pub struct SocialForceParams {
    /// Velocity relaxation time constant (s).
    pub relaxation_time: f64,
    /// Repulsion amplitude (m/s²).
    pub repulsion_strength: f64,
    /// Repulsion decay range (m).
    pub repulsion_range: f64,
    /// Acceleration clamp (m/s²).
    pub max_accel: f64,
    /// Hard speed cap as a multiple of the desired speed.
    pub max_speed_factor: f64,
    /// Radius of the robot's ground projection (m).
    pub robot_radius: f64,
}

impl Default for SocialForceParams {
    fn default() -> Self {
        Self {
            relaxation_time: 0.5,
            repulsion_strength: 2.0,
            repulsion_range: 0.8,
            max_accel: 5.0,
            max_speed_factor: 1.3,
            robot_radius: 0.3,
        }
    }
}

/// A pedestrian switches to the next waypoint within this distance (m).
pub const WAYPOINT_RADIUS: f64 = 0.3;

fn repulsion(
    to_self: Vector2<f64>,
    radii_sum: f64,
    params: &SocialForceParams,
) -> Vector2<f64> {
    let dist = to_self.norm();
    // Coincident agents: push along a fixed axis rather than produce NaN.
    let dir = if dist < 1e-9 {
        Vector2::new(1.0, 0.0)
    } else {
        to_self / dist
    };
    dir * (params.repulsion_strength * ((radii_sum - dist) / params.repulsion_range).exp())
}

/// Acceleration of `ped` from goal attraction toward its current waypoint
/// and repulsion from the other pedestrians and the robot, clamped at
/// `max_accel`. `ped` must not appear in `others`.
pub fn social_force_accel(
    ped: &Pedestrian,
    waypoints: &[Vector2<f64>],
    others: &[Pedestrian],
    robot_pos: &Vector3<f64>,
    params: &SocialForceParams,
) -> Vector2<f64> {
    let goal = waypoints[ped.current_waypoint % waypoints.len()];
    let to_goal = goal - ped.position;
    let dist = to_goal.norm();
    let direction = if dist < 1e-9 {
        Vector2::zeros()
    } else {
        to_goal / dist
    };
    let mut accel = (direction * ped.desired_speed - ped.velocity) / params.relaxation_time;

    for other in others {
        accel += repulsion(
            ped.position - other.position,
            ped.radius + other.radius,
            params,
        );
    }
    accel += repulsion(
        ped.position - Vector2::new(robot_pos[0], robot_pos[1]),
        ped.radius + params.robot_radius,
        params,
    );

    let norm = accel.norm();
    if norm > params.max_accel {
        accel *= params.max_accel / norm;
    }
    accel
}

/// Semi-implicit Euler step with the hard speed cap; advances the waypoint
/// index when the pedestrian reaches its target.
pub fn step_pedestrian(
    ped: &mut Pedestrian,
    waypoints: &[Vector2<f64>],
    accel: Vector2<f64>,
    dt: f64,
    params: &SocialForceParams,
) {
    ped.velocity += accel * dt;
    let cap = params.max_speed_factor * ped.desired_speed;
    let speed = ped.velocity.norm();
    if speed > cap {
        ped.velocity *= cap / speed;
    }
    ped.position += ped.velocity * dt;
    let goal = waypoints[ped.current_waypoint % waypoints.len()];
    if (goal - ped.position).norm() < WAYPOINT_RADIUS {
        ped.current_waypoint = (ped.current_waypoint + 1) % waypoints.len();
    }
}
