#pragma once

namespace attnshift {
struct InterventionPlan;
}
