#ifndef MSM_RNG_HPP
#define MSM_RNG_HPP

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace msm {

// A per-chain random stream. Every stochastic operation takes the stream it
// draws from explicitly; the full state (engine plus the normal
// distribution's cached variate) serializes to text for checkpoints.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    // Uniform on [0, 1).
    double uniform() { return uniform_(engine_); }

    std::string state() const {
        std::ostringstream os;
        os << engine_ << ' ' << normal_ << ' ' << uniform_;
        return os.str();
    }
    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> engine_ >> normal_ >> uniform_;
    }

    friend bool operator==(const RngStream& a, const RngStream& b) { return a.state() == b.state(); }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace msm

#endif
