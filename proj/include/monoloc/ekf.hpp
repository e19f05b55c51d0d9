// Copyright 2026 The monoloc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Range-based relative localization of a peer robot j in the horizontal
// frame of robot i, and a two-robot simulator that turns the filter output
// into self-supervised image labels.
//
// State [x, y, psi]: planar position of j in i's frame and relative yaw.
// Inputs are the body-frame planar velocities and yaw rates of both robots,
// their heights, and the UWB range between them.

#ifndef MONOLOC_EKF_HPP_
#define MONOLOC_EKF_HPP_

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "monoloc/common.hpp"
#include "monoloc/datagen.hpp"
#include "monoloc/geometry.hpp"

namespace monoloc {

struct EkfInputs {
  Eigen::Vector2d v_i = Eigen::Vector2d::Zero();
  Eigen::Vector2d v_j = Eigen::Vector2d::Zero();
  double r_i = 0, r_j = 0;
  double h_i = 0, h_j = 0;
  double range = 0;
};

/// Standard deviations of the sensor noise. The filter derives Q from the
/// velocity and yaw-rate terms and R from the range term.
struct EkfNoise {
  double velocity = 0.05;
  double yaw_rate = 0.01;
  double range = 0.1;
  double height = 0.02;
  /// Random-walk floor on the state, per sqrt(second); absorbs
  /// linearization error so the filter can still correct a wrong prior.
  double position_walk = 0.005;
  double yaw_walk = 0.01;
};

struct EkfState {
  Eigen::Vector3d mean = Eigen::Vector3d(1.0, 0.0, 0.0);
  Eigen::Matrix3d cov = Eigen::Vector3d(4.0, 4.0, 1.0).asDiagonal();
};

/// Continuous-time relative dynamics.
inline Eigen::Vector3d relative_dynamics(const Eigen::Vector3d& s, const EkfInputs& u) {
  const double c = std::cos(s.z()), sn = std::sin(s.z());
  return {u.v_j.x() * c - u.v_j.y() * sn - u.v_i.x() + u.r_i * s.y(),
          u.v_j.x() * sn + u.v_j.y() * c - u.v_i.y() - u.r_i * s.x(), u.r_j - u.r_i};
}

/// Jacobian of the Euler step s + dt * f(s, u) with respect to s.
inline Eigen::Matrix3d dynamics_jacobian(const Eigen::Vector3d& s, const EkfInputs& u, double dt) {
  const double c = std::cos(s.z()), sn = std::sin(s.z());
  Eigen::Matrix3d a;
  a << 0, u.r_i, -u.v_j.x() * sn - u.v_j.y() * c,
       -u.r_i, 0, u.v_j.x() * c - u.v_j.y() * sn,
       0, 0, 0;
  return Eigen::Matrix3d::Identity() + dt * a;
}

/// Process noise: per-step input noise mapped through d(f)/d(u), plus the
/// random-walk floor.
inline Eigen::Matrix3d process_noise(const Eigen::Vector3d& s, const EkfInputs& u, double dt,
                                     const EkfNoise& n) {
  (void)u;
  const double c = std::cos(s.z()), sn = std::sin(s.z());
  Eigen::Matrix<double, 3, 6> g;
  g << -1, 0, c, -sn, s.y(), 0,
        0, -1, sn, c, -s.x(), 0,
        0, 0, 0, 0, -1, 1;
  Eigen::Matrix<double, 6, 1> var;
  const double vv = n.velocity * n.velocity, rr = n.yaw_rate * n.yaw_rate;
  var << vv, vv, vv, vv, rr, rr;
  Eigen::Matrix3d q = dt * dt * g * var.asDiagonal() * g.transpose();
  q.diagonal() += dt * Eigen::Vector3d(n.position_walk * n.position_walk, n.position_walk * n.position_walk,
                                       n.yaw_walk * n.yaw_walk);
  return q;
}

inline Eigen::Matrix3d symmetrized(const Eigen::Matrix3d& m) { return 0.5 * (m + m.transpose()); }

inline void require_finite_inputs(const EkfInputs& u) {
  if (!u.v_i.allFinite() || !u.v_j.allFinite() || !std::isfinite(u.r_i) || !std::isfinite(u.r_j) ||
      !std::isfinite(u.h_i) || !std::isfinite(u.h_j) || !std::isfinite(u.range))
    throw NonFiniteError("ekf: non-finite input");
}

inline EkfState ekf_predict(const EkfState& st, const EkfInputs& u, double dt, const EkfNoise& noise = {}) {
  if (!(dt > 0)) throw Error("ekf_predict: dt must be positive");
  require_finite_inputs(u);
  const Eigen::Matrix3d f = dynamics_jacobian(st.mean, u, dt);
  EkfState out;
  out.mean = st.mean + dt * relative_dynamics(st.mean, u);
  out.cov = symmetrized(f * st.cov * f.transpose() + process_noise(st.mean, u, dt, noise));
  return out;
}

inline double predicted_range(const Eigen::Vector3d& s, double h_ij) {
  return std::sqrt(s.x() * s.x() + s.y() * s.y() + h_ij * h_ij);
}

inline Eigen::RowVector3d range_jacobian(const Eigen::Vector3d& s, double h_ij) {
  const double r = predicted_range(s, h_ij);
  return {s.x() / r, s.y() / r, 0.0};
}

/// Hessian of the range with respect to the state.
inline Eigen::Matrix3d range_hessian(const Eigen::Vector3d& s, double h_ij) {
  const double r = predicted_range(s, h_ij);
  const Eigen::Vector2d p(s.x(), s.y());
  Eigen::Matrix3d out = Eigen::Matrix3d::Zero();
  out.topLeftCorner<2, 2>() = (Eigen::Matrix2d::Identity() * r * r - p * p.transpose()) / (r * r * r);
  return out;
}

/// Second-order term of the innovation variance, 0.5 tr((H2 P)^2). Large
/// while the prior is wide, so early updates do not overstate their
/// information.
inline double range_curvature_variance(const EkfState& st, double h_ij) {
  const Eigen::Matrix3d hp = range_hessian(st.mean, h_ij) * st.cov;
  return 0.5 * (hp * hp).trace();
}

struct RangeUpdate {
  EkfState state;
  bool applied = true;  // false when the jacobian is undefined
};

/// Scalar EKF update with the Joseph-form covariance.
inline RangeUpdate ekf_update_range(const EkfState& st, double range, double h_ij, const EkfNoise& noise = {}) {
  if (!(range >= 0) || !std::isfinite(range) || !std::isfinite(h_ij))
    throw Error("ekf_update_range: range must be finite and non-negative");
  const double pred = predicted_range(st.mean, h_ij);
  if (!(pred > 1e-12)) return {st, false};
  const Eigen::RowVector3d h = range_jacobian(st.mean, h_ij);
  const double r = noise.range * noise.range + range_curvature_variance(st, h_ij);
  const double s = (h * st.cov * h.transpose())(0, 0) + r;
  const Eigen::Vector3d k = st.cov * h.transpose() / s;
  const Eigen::Matrix3d ikh = Eigen::Matrix3d::Identity() - k * h;
  RangeUpdate out;
  out.state.mean = st.mean + k * (range - pred);
  out.state.cov = symmetrized(ikh * st.cov * ikh.transpose() + r * k * k.transpose());
  return out;
}

inline double min_eigenvalue(const Eigen::Matrix3d& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

// ---------------------------------------------------------------------------
// Simulation

struct SimConfig {
  double duration = 60.0;      // seconds per episode
  double dt = 0.01;            // prediction step
  double uwb_period = 0.02;    // range update interval
  double camera_period = 0.5;  // label frame interval
  double burn_in = 20.0;       // no frames before this time
  int episodes = 1;
  bool noise_free = false;
  EkfNoise sensor_noise;       // what the simulator adds
  EkfNoise filter_noise;       // what the filter assumes
  double max_speed = 0.6;      // observer body speed amplitude, m/s
  double max_yaw_rate = 1.0;   // observer yaw-rate amplitude, rad/s
  double relative_yaw_amplitude = 0.5;
  double path_frequency_min = 0.1;   // rad/s, peer path in the image
  double path_frequency_max = 0.5;
  double attitude_amplitude = 0.2;
  double height = 1.0;         // observer mean height
  SceneConfig scene;           // depth range and sprite size for the view

  void validate() const {
    if (!(dt > 0) || !(duration > 0) || !(uwb_period >= dt) || !(camera_period >= dt))
      throw ConfigError("ekf: need dt > 0, duration > 0, periods >= dt");
    if (burn_in < 0 || burn_in > duration) throw ConfigError("ekf: burn_in must lie in [0, duration]");
    if (episodes < 1) throw ConfigError("ekf: episodes must be >= 1");
    if (!(attitude_amplitude >= 0 && attitude_amplitude < M_PI / 2)) throw ConfigError("ekf: bad attitude amplitude");
    scene.validate();
  }
};

namespace detail {

/// Sum of three sinusoids normalized to [-1, 1].
struct Wave {
  double amp[3], freq[3], phase[3];

  static Wave random(Rng& rng, double fmin, double fmax) {
    Wave w;
    double total = 0;
    for (int k = 0; k < 3; ++k) {
      w.amp[k] = rng.uniform(0.2, 1.0);
      w.freq[k] = rng.uniform(fmin, fmax);
      w.phase[k] = rng.uniform(0, 2 * M_PI);
      total += w.amp[k];
    }
    for (double& a : w.amp) a /= total;
    return w;
  }
  double operator()(double t) const {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += amp[k] * std::sin(freq[k] * t + phase[k]);
    return s;
  }
  double derivative(double t) const {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += amp[k] * freq[k] * std::cos(freq[k] * t + phase[k]);
    return s;
  }
};

}  // namespace detail

/// True two-robot motion. The peer path is laid out in image space (pixel
/// position and depth) so it stays in view; everything else follows from
/// the relative kinematics.
class TwoRobotScenario {
 public:
  TwoRobotScenario(const SimConfig& cfg, Rng& rng) : cfg_(cfg) {
    const double f0 = cfg.path_frequency_min, f1 = cfg.path_frequency_max;
    u_ = detail::Wave::random(rng, f0, f1);
    v_ = detail::Wave::random(rng, f0, f1);
    d_ = detail::Wave::random(rng, f0, f1);
    roll_ = detail::Wave::random(rng, 0.3, 1.5);
    pitch_ = detail::Wave::random(rng, 0.3, 1.5);
    vix_ = detail::Wave::random(rng, 0.1, 0.8);
    viy_ = detail::Wave::random(rng, 0.1, 0.8);
    ri_ = detail::Wave::random(rng, 0.1, 0.8);
    psi_ = detail::Wave::random(rng, 0.05, 0.4);
    hi_ = detail::Wave::random(rng, 0.1, 0.5);
    psi0_ = rng.uniform(-cfg.relative_yaw_amplitude, cfg.relative_yaw_amplitude) * 0.5;
  }

  Attitude attitude(double t) const {
    return {cfg_.attitude_amplitude * roll_(t), cfg_.attitude_amplitude * pitch_(t)};
  }

  /// Peer position in i's horizontal frame.
  Eigen::Vector3d relative_position(double t) const {
    const auto& sc = cfg_.scene;
    const double mid = 0.5 * (sc.depth_min + sc.depth_max), half = 0.5 * (sc.depth_max - sc.depth_min);
    const double depth = mid + half * d_(t);
    const double margin = sprite_width_px(sc, depth) / 2 + 8;
    const double px = kImageWidth / 2.0 + (kImageWidth / 2.0 - margin) * u_(t);
    const double py = kImageHeight / 2.0 + (kImageHeight / 2.0 - margin) * v_(t);
    const CameraCoord c = back_project({px, py}, depth, sc.intrinsics);
    return camera_to_horizontal(c, attitude(t)).vec();
  }

  double relative_yaw(double t) const {
    return psi0_ + 0.5 * cfg_.relative_yaw_amplitude * psi_(t);
  }

  /// Exact inputs at time t (range from the true geometry).
  EkfInputs inputs(double t) const {
    EkfInputs in;
    in.v_i = {cfg_.max_speed * vix_(t), cfg_.max_speed * viy_(t)};
    in.r_i = cfg_.max_yaw_rate * ri_(t);
    const double psi_dot = 0.5 * cfg_.relative_yaw_amplitude * psi_.derivative(t);
    in.r_j = in.r_i + psi_dot;
    constexpr double h = 1e-5;
    const Eigen::Vector3d p = relative_position(t);
    const Eigen::Vector3d pdot = (relative_position(t + h) - relative_position(t - h)) / (2 * h);
    // pdot = R(psi) v_j - v_i + r_i * [y, -x]
    const Eigen::Vector2d rhs(pdot.x() + in.v_i.x() - in.r_i * p.y(), pdot.y() + in.v_i.y() + in.r_i * p.x());
    const double psi = relative_yaw(t), c = std::cos(psi), s = std::sin(psi);
    in.v_j = {c * rhs.x() + s * rhs.y(), -s * rhs.x() + c * rhs.y()};
    in.h_i = cfg_.height + 0.2 * hi_(t);
    in.h_j = in.h_i + p.z();
    in.range = p.norm();
    return in;
  }

 private:
  SimConfig cfg_;
  detail::Wave u_, v_, d_, roll_, pitch_, vix_, viy_, ri_, psi_, hi_;
  double psi0_ = 0;
};

struct SimSample {
  double t = 0;
  Eigen::Vector3d truth;     // x, y, psi
  Eigen::Vector3d estimate;  // x, y, psi
  double cov_trace = 0;
  double min_eig = 0;
};

struct SimTrajectory {
  std::vector<SimSample> samples;  // one per prediction step, per episode
  std::vector<EkfInputs> inputs;   // measured (noisy) inputs, per step
  std::vector<int> episode;        // episode index of each sample
  std::size_t skipped_updates = 0;

  double position_error(std::size_t i) const {
    const auto& s = samples[i];
    return std::hypot(s.estimate.x() - s.truth.x(), s.estimate.y() - s.truth.y());
  }
};

struct LabelStream {
  std::vector<DatasetRecord> labels;        // filter estimates
  std::vector<DatasetRecord> ground_truth;  // true relative positions
  std::vector<SceneSpec> scenes;            // true scenes, for rendering
  std::size_t dropped_out_of_view = 0;
};

/// Runs every episode: predict at dt, range update every uwb_period, and
/// once past burn_in a frame every camera_period labeled with
/// (x_hat, y_hat, h_j - h_i). Frames whose estimate projects outside the
/// image are dropped.
inline std::pair<SimTrajectory, LabelStream> simulate_and_label(const SimConfig& cfg, std::uint64_t seed,
                                                                std::size_t num_backgrounds = 0) {
  cfg.validate();
  SimTrajectory traj;
  LabelStream stream;
  const EkfNoise sn = cfg.noise_free ? EkfNoise{0, 0, 0, 0, 0, 0} : cfg.sensor_noise;
  const long steps = static_cast<long>(std::llround(cfg.duration / cfg.dt));
  const long uwb_every = std::max(1L, std::lround(cfg.uwb_period / cfg.dt));
  const long cam_every = std::max(1L, std::lround(cfg.camera_period / cfg.dt));
  const long burn = std::lround(cfg.burn_in / cfg.dt);
  std::size_t frame = 0;
  for (int e = 0; e < cfg.episodes; ++e) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(e)));
    const TwoRobotScenario sc(cfg, rng);
    Rng noise_rng(mix_seed(seed, 0x40000000ULL + e));
    Rng scene_rng(mix_seed(seed, 0x80000000ULL + e));
    EkfState st;
    for (long k = 0; k <= steps; ++k) {
      const double t = k * cfg.dt;
      const EkfInputs truth_in = sc.inputs(t);
      EkfInputs meas = truth_in;
      meas.v_i += Eigen::Vector2d(noise_rng.normal(0, sn.velocity), noise_rng.normal(0, sn.velocity));
      meas.v_j += Eigen::Vector2d(noise_rng.normal(0, sn.velocity), noise_rng.normal(0, sn.velocity));
      meas.r_i += noise_rng.normal(0, sn.yaw_rate);
      meas.r_j += noise_rng.normal(0, sn.yaw_rate);
      meas.h_i += noise_rng.normal(0, sn.height);
      meas.h_j += noise_rng.normal(0, sn.height);
      meas.range = std::max(0.0, meas.range + noise_rng.normal(0, sn.range));

      if (k > 0 && k % uwb_every == 0) {
        const auto up = ekf_update_range(st, meas.range, meas.h_j - meas.h_i, cfg.filter_noise);
        if (!up.applied) ++traj.skipped_updates;
        st = up.state;
      }

      const Eigen::Vector3d p = sc.relative_position(t);
      SimSample s{t, {p.x(), p.y(), sc.relative_yaw(t)}, st.mean, st.cov.trace(), 0.0};
      s.min_eig = min_eigenvalue(st.cov);
      traj.samples.push_back(s);
      traj.inputs.push_back(meas);
      traj.episode.push_back(e);

      if (k >= burn && (k - burn) % cam_every == 0) {
        const Attitude att = sc.attitude(t);
        const HorizontalCoord est{st.mean.x(), st.mean.y(), meas.h_j - meas.h_i};
        const HorizontalCoord tru{p.x(), p.y(), p.z()};
        if (!label_from_horizontal(est, att, cfg.scene.intrinsics) ||
            !label_from_horizontal(tru, att, cfg.scene.intrinsics)) {
          ++stream.dropped_out_of_view;
        } else {
          const std::string name = image_name(frame++);
          stream.labels.push_back({name, att, {est}});
          stream.ground_truth.push_back({name, att, {tru}});
          SceneSpec scene;
          scene.background = num_backgrounds > 0 ? scene_rng.below(num_backgrounds) : 0;
          scene.attitude = att;
          RobotPlacement rp;
          rp.position = tru;
          rp.rotation = scene_rng.uniform(-cfg.scene.rotation_max, cfg.scene.rotation_max);
          rp.brightness = scene_rng.uniform(cfg.scene.brightness_min, cfg.scene.brightness_max);
          scene.robots.push_back(rp);
          stream.scenes.push_back(scene);
        }
      }
      if (k < steps) st = ekf_predict(st, meas, cfg.dt, cfg.filter_noise);
    }
  }
  return {traj, stream};
}

/// Renders the true scenes of a label stream and writes labels.jsonl (filter
/// estimates) plus ground_truth.jsonl next to images/.
inline void write_label_stream(const LabelStream& stream, const fs::path& out_dir,
                               BackgroundSet* backgrounds = nullptr, const DroneSprite* sprite = nullptr,
                               const CameraIntrinsics& k = {}) {
  fs::create_directories(out_dir);
  if (backgrounds) {
    if (backgrounds->size() == 0) throw IoError("no background images to render the label stream");
    fs::create_directories(out_dir / "images");
    for (std::size_t i = 0; i < stream.scenes.size(); ++i) {
      const auto res = composite(backgrounds->get(stream.scenes[i].background), *sprite, stream.scenes[i], k);
      write_png(res.image, out_dir / stream.labels[i].image);
    }
  }
  write_labels_jsonl(stream.labels, out_dir / "labels.jsonl");
  write_labels_jsonl(stream.ground_truth, out_dir / "ground_truth.jsonl");
}

}  // namespace monoloc

#endif  // MONOLOC_EKF_HPP_
